use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptcbf"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Single line with the expected machine-readable prefix.
fn assert_error(o: &Output, code: i32, prefix: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(prefix), "{err}");
}

fn small_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(config("double_integrator.toml"))
        .unwrap()
        .replace("rows = 2000", "rows = 200")
        .replace("epochs = 200", "epochs = 10")
        .replace("duration = 20.0", "duration = 5.0");
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn simulate_creates_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/out");
    let o = run(&["simulate", "--config", config("double_integrator.toml").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["min_b0"].as_f64().unwrap() >= -1e-3);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(
        trace.lines().next().unwrap(),
        "t,x_0,x_1,u_0,b_0,b_1,feasibility_margin,inner_margin,k_1,k_2,filter_active,event"
    );
    assert_eq!(trace.lines().count(), 2002);
}

#[test]
fn negative_gain_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("double_integrator.toml"))
        .unwrap()
        .replace("params = [0.5, 0.5]", "params = [-1.0, 1.0]");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let o = run(&["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_error(&o, 2, "error[config]:");
    assert!(stderr(&o).contains("positivity"));
}

#[test]
fn malformed_config_reports_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "[scenario]\nmodel = \n").unwrap();
    let o = run(&["simulate", "--config", path.to_str().unwrap()]);
    assert_error(&o, 2, "error[config]:");
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("double_integrator.toml");
    let out = dir.path().to_str().unwrap();

    let o = run(&["simulate", "--config", "/nonexistent/scenario.toml"]);
    assert_error(&o, 2, "error[input]:");
    assert!(stderr(&o).contains("/nonexistent/scenario.toml"));

    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_error(&o, 2, "error[input]:");
    assert!(stderr(&o).contains("dataset.csv"));

    let o = run(&["adapt-run", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_error(&o, 2, "error[input]:");
    assert!(stderr(&o).contains("model.json"));
}

#[test]
fn usage_errors_are_single_line() {
    assert_error(&run(&["simulate"]), 2, "error[usage]:");
    assert_error(&run(&["fly"]), 2, "error[usage]:");
    assert!(run(&["--help"]).status.success());
}

#[test]
fn oracle_adaptation_needs_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = run(&["adapt-run", "--oracle", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("adaptation.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.starts_with(r#"{"kind":"event""#)));
    assert!(out.join("trace.csv").is_file());
}

#[test]
fn validate_param_reports_the_empty_set_witness() {
    let o = run(&[
        "validate-param",
        "--config",
        config("double_integrator.toml").to_str().unwrap(),
        "--state",
        "0.5,1.5",
        "--params",
        "3,1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["validated"], false);

    let o = run(&[
        "validate-param",
        "--config",
        config("double_integrator.toml").to_str().unwrap(),
        "--state",
        "-0.5,0",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["validated"], true);

    let o = run(&[
        "validate-param",
        "--config",
        config("double_integrator.toml").to_str().unwrap(),
        "--params",
        "1,-2",
    ]);
    assert_error(&o, 2, "error[input]:");
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let out = out.to_str().unwrap();
        for stage in ["simulate", "generate-data", "train", "adapt-run"] {
            let o = run(&[stage, "--config", cfg, "--out", out, "--seed", "5"]);
            assert!(o.status.success(), "{stage}: {}", stderr(&o));
        }
        let mut files: Vec<_> = std::fs::read_dir(out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        runs.push(
            files
                .iter()
                .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(runs[0].len(), 7);
    assert_eq!(runs[0], runs[1]);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
}
