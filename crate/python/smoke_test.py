"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/pyadaptcbf-*.whl
"""

import pathlib
import sys
import tempfile

import pyadaptcbf

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_loop():
    loop = pyadaptcbf.SafetyLoop("double_integrator", "upper_bound", 0, 1.0)
    assert (loop.state_dim, loop.input_dim) == (2, 1)

    ev = loop.evaluate([0.0, 0.0], [1.0, 1.0])
    assert ev["feasible"] and ev["inner_margin"] >= 0.0
    # b_2 = -u - (k1 + k2) v + k1 k2 (1 - p)
    assert abs(ev["offset"] - 1.0) < 1e-9 and abs(ev["slope"][0] + 1.0) < 1e-9

    u = loop.filter([0.0, 0.0], [0.5, 0.5], [2.0, 0.0])
    assert -1.0 <= u[0] <= 0.25 + 1e-12

    witness = loop.validate([0.5, 1.5], [3.0, 1.0], [2.0, 0.0])
    assert witness["validated"] is False

    steps = loop.simulate([0.0, 0.0], [0.5, 0.5], [2.0, 0.0], 5.0)
    assert len(steps) == 501
    assert min(s["stack"][0] for s in steps) >= -1e-3

    events, steps = loop.adapt([0.0, 0.0], [0.5, 0.5], [2.0, 0.0], 4.0, seed=1)
    assert len(events) == 8
    assert min(s["stack"][0] for s in steps) >= -1e-3

    try:
        loop.evaluate([0.0, 0.0], [-1.0, 1.0])
    except ValueError as e:
        assert "positivity" in str(e)
    else:
        raise AssertionError("negative gain accepted")


def check_pipeline():
    text = (ROOT / "configs" / "double_integrator.toml").read_text()
    text = text.replace("rows = 2000", "rows = 200").replace("epochs = 200", "epochs = 10")
    scn = pyadaptcbf.Scenario.from_toml(text)
    with tempfile.TemporaryDirectory() as tmp:
        out = pathlib.Path(tmp)
        summary = scn.simulate(out / "sim")
        assert summary["min_b0"] >= -1e-3
        assert scn.generate_data(out / "data") == 200
        report = scn.train(out / "data" / "dataset.csv", out / "data")
        assert len(report["final_nll"]) == 5
        model = pyadaptcbf.Ensemble.load(out / "data" / "model.json")
        pred = model.predict(pyadaptcbf.Ensemble.features([0.0, 0.0], [2.0, 0.0], [0.5, 0.5]))
        assert len(pred["targets"]) == 2 and pred["targets"][0]["epistemic_var"] >= 0.0
        adapted = scn.adapt(out / "adapt", out / "data" / "model.json")
        assert adapted["violations"] == 0
        oracle = scn.adapt(out / "oracle")
        assert oracle["mode"] == "adaptive_oracle"
    assert scn.validate_param([0.5, 1.5], [3.0, 1.0])["validated"] is False


def main():
    check_loop()
    check_pipeline()
    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
