//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use adaptcbf::adaptation::{
    adapt_run, reshaping_witnesses, simulate_fixed, time_to_reach, AdaptationConfig, AdaptationLog,
    EnsembleScorer, EventOutcome, OracleScorer,
};
use adaptcbf::harness::{self, Scenario, ScenarioConfig};
use adaptcbf::iccbf::{kcand_feasible, AffineConstraint};
use adaptcbf::penn::{flatten_gradients, train_with_report, MlpMember, TrainConfig};
use adaptcbf::qp_filter::project_onto_constraint;
use adaptcbf::validator::{validate_horizon, FeatureStats, ValidationSettings, MEMBERSHIP_TOL};
use adaptcbf::{
    ClassKParams, DoubleIntegrator, IccbfSpec, InputBox, InputVec, PdGains, SafetyLoop, StateVec, Unicycle,
    UpperBound,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn sv(v: &[f64]) -> StateVec {
    StateVec::from_column_slice(v)
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scenario(name: &str) -> Scenario {
    ScenarioConfig::load(&configs().join(name))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
        .resolve()
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn di_loop() -> SafetyLoop {
    SafetyLoop::new(
        Arc::new(DoubleIntegrator::default()),
        Arc::new(UpperBound { index: 0, limit: 1.0 }),
        PdGains::new(1.0, 1.5).unwrap(),
    )
}

fn iccbf_oracle() -> Outcome {
    let lp = di_loop();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, v) = (rng.random_range(-5.0..1.0), rng.random_range(-3.0..3.0));
        let u = rng.random_range(-1.0..=1.0);
        let (k1, k2) = (rng.random_range(0.05..10.0), rng.random_range(0.05..10.0));
        let spec = lp.spec(&ClassKParams::new(vec![k1, k2]).unwrap());
        let got = spec.evaluate(&sv(&[p, v])).unwrap().constraint.value(&sv(&[u]));
        let want = -u - (k1 + k2) * v + k1 * k2 * (1.0 - p);
        worst = worst.max((got - want).abs());
    }
    outcome(worst <= 1e-9, format!("max |b_2 - symbolic| = {worst:e} over 1000 samples"))
}

fn feasibility_cross_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut disagreements = 0;
    let grid = |lo: f64, hi: f64| -> Vec<f64> { (0..201).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect() };

    let di = Arc::new(DoubleIntegrator::default());
    let uni = Arc::new(Unicycle::default());
    for i in 0..1000 {
        let k = ClassKParams::new(vec![rng.random_range(0.1..5.0), rng.random_range(0.1..5.0)]).unwrap();
        let (spec, x) = if i % 2 == 0 {
            let spec = IccbfSpec::new(di.clone(), Arc::new(UpperBound { index: 0, limit: 1.0 }), k);
            (spec, sv(&[rng.random_range(-3.0..1.0), rng.random_range(-3.0..3.0)]))
        } else {
            let spec = IccbfSpec::new(uni.clone(), Arc::new(UpperBound { index: 0, limit: 2.0 }), k);
            let x = sv(&[
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-3.2..3.2),
            ]);
            (spec, x)
        };
        let feas = kcand_feasible(&spec, &x).unwrap();
        let c = spec.evaluate(&x).unwrap().constraint;
        let bx = spec.model().input_box();
        let axes: Vec<Vec<f64>> = (0..bx.dim()).map(|j| grid(bx.lower()[j], bx.upper()[j])).collect();
        let best = match axes.len() {
            1 => axes[0].iter().map(|&u| c.value(&sv(&[u]))).fold(f64::NEG_INFINITY, f64::max),
            _ => axes[0]
                .iter()
                .flat_map(|&a| axes[1].iter().map(move |&b| (a, b)))
                .map(|(a, b)| c.value(&sv(&[a, b])))
                .fold(f64::NEG_INFINITY, f64::max),
        };
        // box corners are grid points, so the grid attains the supremum
        if feas.feasible != (best >= -1e-9) {
            disagreements += 1;
        }
    }
    let lp = di_loop();
    let witness = ClassKParams::new(vec![3.0, 1.0]).unwrap();
    let x = sv(&[0.5, 1.5]);
    let goal = sv(&[2.0, 0.0]);
    let report = validate_horizon(
        &lp.spec(&witness),
        &lp.policy(&witness, &goal),
        &x,
        &goal,
        &ValidationSettings::default(),
    )
    .unwrap();
    let witness_ok = !report.validated && report.infeasible_at == Some(0.0);
    outcome(
        disagreements == 0 && witness_ok,
        format!(
            "{disagreements} grid disagreements in 1000 states; empty-set witness validated = {}",
            report.validated
        ),
    )
}

fn forward_invariance() -> Outcome {
    let scn = scenario("double_integrator.toml");
    let steps = simulate_fixed(&scn.safety_loop, &scn.params, &scn.goal, &scn.x0, 20.0, 0.01).unwrap();
    let min_b0 = steps.iter().map(|s| s.b0()).fold(f64::INFINITY, f64::min);
    outcome(
        min_b0 >= -1e-3 && steps.len() == 2001,
        format!("min b_0 = {min_b0:e} over 20 s"),
    )
}

fn qp_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut infeasible_output = 0;
    let mut fixed_point_failures = 0;
    let mut checked = 0;
    while checked < 1000 {
        let m = [1, 2, 1, 2, 3][checked % 5];
        let lower: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..0.0)).collect();
        let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(0.1..4.0)).collect();
        let bx = InputBox::new(lower.clone(), upper.clone()).unwrap();
        let c = AffineConstraint {
            offset: rng.random_range(-3.0..3.0),
            slope: DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
        };
        if c.sup(&bx) < 0.0 {
            continue;
        }
        let u_nom = InputVec::from_fn(m, |j, _| rng.random_range(lower[j]..=upper[j]));
        let r = project_onto_constraint(&c, &bx, &u_nom);
        checked += 1;
        if c.value(&u_nom) >= 0.0 {
            if r.input != u_nom || r.modified {
                fixed_point_failures += 1;
            }
            continue;
        }
        if c.value(&r.input) < -1e-9 || !bx.contains(&r.input) {
            infeasible_output += 1;
        }
        let dev = (&r.input - &u_nom).norm();
        let axes: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..101).map(|i| lower[j] + (upper[j] - lower[j]) * i as f64 / 100.0).collect())
            .collect();
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; m];
        let mut u = InputVec::zeros(m);
        'grid: loop {
            for j in 0..m {
                u[j] = axes[j][idx[j]];
            }
            if c.value(&u) >= 0.0 {
                best = best.min((&u - &u_nom).norm());
            }
            for j in 0..m {
                idx[j] += 1;
                if idx[j] < 101 {
                    continue 'grid;
                }
                idx[j] = 0;
            }
            break;
        }
        if best.is_finite() {
            worst_gap = worst_gap.max(dev - best);
        }
    }
    outcome(
        worst_gap <= 1e-3 && infeasible_output == 0 && fixed_point_failures == 0,
        format!(
            "worst (filter - best grid) deviation = {worst_gap:e}; infeasible outputs {infeasible_output}; fixed-point failures {fixed_point_failures}"
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let inputs = rng.random_range(1..5);
        let targets = rng.random_range(1..3);
        let mut sizes = vec![inputs];
        for _ in 0..rng.random_range(1..3) {
            sizes.push(rng.random_range(2..9));
        }
        sizes.push(2 * targets);
        let mut net = MlpMember::random(&sizes, &mut rng).unwrap();
        let batch = rng.random_range(1..9);
        let x = DMatrix::from_fn(inputs, batch, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(targets, batch, |_, _| rng.random_range(-2.0..2.0));
        let analytic = flatten_gradients(&net.loss_and_gradients(&x, &y).1);
        let params = net.params_flat();
        let mut numeric = vec![0.0; params.len()];
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] = params[i] + h;
            net.set_params_flat(&p);
            let plus = net.loss_and_gradients(&x, &y).0;
            p[i] = params[i] - h;
            net.set_params_flat(&p);
            let minus = net.loss_and_gradients(&x, &y).0;
            numeric[i] = (plus - minus) / (2.0 * h);
        }
        net.set_params_flat(&params);
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm_a = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let norm_n = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm_a.max(norm_n).max(1e-12));
    }
    outcome(worst < 1e-4, format!("worst relative gradient error {worst:e} over 20 networks"))
}

fn epistemic_ood() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let features: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let targets: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let x = f[0];
            let sigma = 0.05 + 0.1 * x.abs();
            vec![(3.0 * x).sin() + sigma * noise.sample(&mut rng), x * x + 0.05 * noise.sample(&mut rng)]
        })
        .collect();
    let stats = FeatureStats::from_rows(1, features.iter().map(|r| r.as_slice()));
    let cfg = TrainConfig {
        seed: 6,
        ..TrainConfig::default()
    };
    let (model, report) = train_with_report(&features, &targets, stats, &cfg).unwrap();
    let mean_epi = |xs: &[f64]| -> f64 {
        xs.iter()
            .map(|&x| model.predict(&[x]).unwrap().safety().epistemic_var)
            .sum::<f64>()
            / xs.len() as f64
    };
    let inside: Vec<f64> = (0..101).map(|i| -1.0 + 2.0 * i as f64 / 100.0).collect();
    // region width 2: three widths beyond either edge
    let outside: Vec<f64> = (0..101)
        .map(|i| {
            let s = -1.0 + 2.0 * i as f64 / 100.0;
            if i % 2 == 0 {
                7.0 + s
            } else {
                -7.0 + s
            }
        })
        .collect();
    let (a, b) = (mean_epi(&inside), mean_epi(&outside));
    let improved = report
        .initial_nll
        .iter()
        .zip(&report.final_nll)
        .all(|(i, f)| f < i);
    outcome(
        b >= 2.0 * a && improved,
        format!("epistemic variance in-distribution {a:e}, out-of-distribution {b:e} (ratio {:.1})", b / a),
    )
}

/// Random benchmark scenario with validated initial gains.
fn random_di_case(rng: &mut ChaCha8Rng, lp: &SafetyLoop, settings: &ValidationSettings) -> (ClassKParams, StateVec, StateVec) {
    loop {
        let k = ClassKParams::new(vec![rng.random_range(0.3f64..2.0), rng.random_range(0.3f64..2.0)]).unwrap();
        let x0 = sv(&[rng.random_range(-2.0..0.8), rng.random_range(-0.5..0.5)]);
        let goal = sv(&[rng.random_range(1.5..3.0), 0.0]);
        let spec = lp.spec(&k);
        if spec.evaluate(&x0).unwrap().stack.inner_margin() < -MEMBERSHIP_TOL {
            continue;
        }
        if validate_horizon(&spec, &lp.policy(&k, &goal), &x0, &goal, settings)
            .unwrap()
            .validated
        {
            return (k, x0, goal);
        }
    }
}

/// Re-derives every adoption report from the logged event state.
fn adoptions_reproduce(lp: &SafetyLoop, log: &AdaptationLog, goal: &StateVec, settings: &ValidationSettings) -> bool {
    log.events.iter().all(|e| match e.outcome {
        EventOutcome::Frozen => false,
        _ => {
            let Some(report) = &e.report else { return false };
            let x = sv(&e.state);
            let again = validate_horizon(&lp.spec(&e.adopted), &lp.policy(&e.adopted, goal), &x, goal, settings);
            report.validated && again.ok().as_ref() == Some(report)
        }
    })
}

fn adaptation_end_to_end() -> Outcome {
    let lp = di_loop();
    let base = AdaptationConfig::default();
    let settings = base.validation();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut violations, mut schedule, mut unsound, mut changes) = (0, 0, 0, 0);
    for run in 0..50u64 {
        let (k, x0, goal) = random_di_case(&mut rng, &lp, &settings);
        let cfg = AdaptationConfig { seed: run, ..base.clone() };
        let log = adapt_run(&lp, &k, &OracleScorer, &goal, &x0, 10.0, &cfg).unwrap();
        if log.min_b0() < -1e-3 {
            violations += 1;
        }
        if !(log.max_event_gap() < cfg.horizon) || log.events.is_empty() {
            schedule += 1;
        }
        if !adoptions_reproduce(&lp, &log, &goal, &settings) {
            unsound += 1;
        }
        changes += log.parameter_changes();
    }
    outcome(
        violations == 0 && schedule == 0 && unsound == 0,
        format!(
            "50 runs: {violations} with violations, {schedule} schedule breaches, {unsound} with unsound adoptions ({changes} gain changes total)"
        ),
    )
}

fn conservatism_relief() -> Outcome {
    let scn = scenario("double_integrator.toml");
    let lp = &scn.safety_loop;
    let tol = scn.reach_tolerance();
    let fixed = simulate_fixed(lp, &scn.params, &scn.goal, &scn.x0, scn.duration(), scn.dt()).unwrap();
    let t_fixed = time_to_reach(lp, &fixed, &scn.reach_goal, tol);

    let oracle = adapt_run(lp, &scn.params, &OracleScorer, &scn.goal, &scn.x0, scn.duration(), &scn.adaptation).unwrap();
    let t_oracle = time_to_reach(lp, &oracle.steps, &scn.reach_goal, tol);
    let witnesses = reshaping_witnesses(lp, &oracle.steps, &scn.params).unwrap().len();

    // the same comparison with the learned scorer, trained from scratch
    let dir = tempfile::tempdir().unwrap();
    let learned = harness::run_generate_data(&scn, dir.path())
        .and_then(|_| harness::run_train(&scn, &dir.path().join(harness::DATASET_FILE), dir.path()))
        .and_then(|_| {
            let model = adaptcbf::EnsembleModel::load(&dir.path().join(harness::MODEL_FILE)).map_err(harness::CliError::from)?;
            let log = adapt_run(
                lp,
                &scn.params,
                &EnsembleScorer { model: &model },
                &scn.goal,
                &scn.x0,
                scn.duration(),
                &scn.adaptation,
            )?;
            Ok(log)
        });
    let (t_learned, learned_min_b0) = match &learned {
        Ok(log) => (time_to_reach(lp, &log.steps, &scn.reach_goal, tol), log.min_b0()),
        Err(_) => (None, f64::NAN),
    };

    let no_later = |t: Option<f64>| match (t, t_fixed) {
        (Some(a), Some(b)) => a <= b,
        (Some(_), None) => true,
        _ => false,
    };
    outcome(
        no_later(t_oracle) && no_later(t_learned) && witnesses > 0 && learned_min_b0 >= -1e-3,
        format!(
            "time to goal: fixed {t_fixed:?}, adaptive oracle {t_oracle:?}, adaptive ensemble {t_learned:?}; {witnesses} reshaping witness steps"
        ),
    )
}

fn quadplane_smoke() -> Outcome {
    let scn = scenario("quadplane.toml");
    let log = adapt_run(
        &scn.safety_loop,
        &scn.params,
        &OracleScorer,
        &scn.goal,
        &scn.x0,
        scn.duration(),
        &scn.adaptation,
    )
    .unwrap();
    let min_b0 = log.min_b0();
    let floor_violations = log.steps.iter().filter(|s| s.b0() < -1e-3).count();
    outcome(
        floor_violations == 0,
        format!(
            "min altitude margin {min_b0:e}; {} events, {} gain changes",
            log.events.len(),
            log.parameter_changes()
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let text = std::fs::read_to_string(configs().join("double_integrator.toml"))
        .unwrap()
        .replace("rows = 2000", "rows = 300")
        .replace("epochs = 200", "epochs = 20");
    let make = || ScenarioConfig::parse(&text).unwrap().resolve().unwrap();
    let run_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
        let scn = make();
        let sim = dir.join("simulate");
        let learned = dir.join("learned");
        let oracle = dir.join("oracle");
        harness::run_simulate(&scn, &sim).unwrap();
        harness::run_generate_data(&scn, &learned).unwrap();
        harness::run_train(&scn, &learned.join(harness::DATASET_FILE), &learned).unwrap();
        harness::run_adapt(&scn, Some(&learned.join(harness::MODEL_FILE)), &learned).unwrap();
        harness::run_adapt(&scn, None, &oracle).unwrap();
        let report = harness::run_validate_param(&scn, Some(&[0.5, 1.5]), Some(&[3.0, 1.0])).unwrap();
        let mut out = Vec::new();
        for sub in [&sim, &learned, &oracle] {
            for (name, bytes) in read_dir_bytes(sub) {
                out.push((format!("{}/{name}", sub.file_name().unwrap().to_string_lossy()), bytes));
            }
        }
        out.push(("validate-param".into(), serde_json::to_vec(&report).unwrap()));
        out
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_all(a.path());
    let second = run_all(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        first.len() == second.len() && differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", first.len()),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("AC1 ICCBF oracle equivalence", Duration::from_secs(1), iccbf_oracle),
        ("AC2 feasibility cross-check", Duration::from_secs(5), feasibility_cross_check),
        ("AC3 forward invariance", Duration::from_secs(1), forward_invariance),
        ("AC4 QP optimality", Duration::from_secs(5), qp_optimality),
        ("AC5 PENN gradient check", Duration::from_secs(10), gradient_check),
        ("AC6 PENN epistemic OOD separation", Duration::from_secs(60), epistemic_ood),
        ("AC7 adaptation end-to-end (oracle)", Duration::from_secs(120), adaptation_end_to_end),
        ("AC8 conservatism relief", Duration::from_secs(30), conservatism_relief),
        ("AC9 quadplane smoke", Duration::from_secs(60), quadplane_smoke),
        ("AC10 determinism", Duration::MAX, determinism),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check);
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let in_budget = elapsed <= budget;
        let ok = pass && in_budget;
        if !ok {
            failed += 1;
        }
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(" budget {:.0} s", budget.as_secs_f64())
        };
        println!(
            "{} {name}: {detail} [{:.2} s{budget_note}{}]",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
