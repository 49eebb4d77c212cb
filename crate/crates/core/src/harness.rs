//! Command-line stages: fixed-gain simulation, dataset generation, ensemble
//! training, adaptive runs and single validation queries.
//!
//! Errors surface as one line on stderr, `error[<kind>]: <reason>`, where
//! kind is `usage` or `config` or `input` (exit code 2) or `runtime` (exit
//! code 1).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adaptation::{
    adapt_run, simulate_fixed, time_to_reach, AdaptationLog, CandidateScorer, EnsembleScorer, EventOutcome,
    OracleScorer, StepRecord,
};
use crate::barrier::ClassKParams;
use crate::dynamics::StateVec;
use crate::error::Error;
use crate::penn::{train_with_report, EnsembleModel, TrainingReport};
use crate::validator::{generate_dataset, validate_horizon, Dataset, ValidationReport};

pub mod config;

pub use config::{ConfigError, Scenario, ScenarioConfig};

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const MODEL_FILE: &str = "model.json";
pub const ADAPTATION_LOG_FILE: &str = "adaptation.jsonl";
pub const TRAINING_REPORT_FILE: &str = "training.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Input,
    Runtime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Runtime => 1,
            _ => 2,
        }
    }

    fn input(message: impl ToString) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::runtime(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
            ErrorKind::Input => "input",
            ErrorKind::Runtime => "runtime",
        };
        // keep the reason on one line
        write!(f, "error[{kind}]: {}", self.message.replace('\n', " "))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::InvalidParameter(_)
            | Error::InvalidInput(_)
            | Error::DimensionMismatch { .. }
            | Error::Precondition(_)
            | Error::OutOfSet { .. }
            | Error::DatasetTooSmall { .. }
            | Error::Version { .. }
            | Error::Parse { .. } => ErrorKind::Input,
            _ => ErrorKind::Runtime,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "adaptcbf", version, about = "Input-constrained barrier filtering with online gain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed loop with the configured fixed gains.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Labeled validation rollouts for training.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the ensemble on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; defaults to `<out>/dataset.csv`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Closed loop with online gain adaptation.
    AdaptRun {
        #[command(flatten)]
        common: Common,
        /// Score candidates by direct validation instead of the ensemble.
        #[arg(long)]
        oracle: bool,
        /// Ensemble file; defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Validate one gain vector from one state and print the report as JSON.
    ValidateParam {
        #[command(flatten)]
        common: Common,
        /// Comma-separated state; defaults to `scenario.x0`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        state: Option<Vec<f64>>,
        /// Comma-separated gains; defaults to `barrier.params`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        params: Option<Vec<f64>>,
    },
}

/// Parse `args` (program name first), run the stage, report errors on
/// stderr, and return the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let err = CliError {
                kind: ErrorKind::Usage,
                message: first.trim_start_matches("error: ").to_string(),
            };
            eprintln!("{err}");
            return err.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { common } => {
            let scn = load_scenario(&common)?;
            let summary = run_simulate(&scn, &common.out)?;
            println!("min_b0 = {}", summary.min_b0);
        }
        Command::GenerateData { common } => {
            let scn = load_scenario(&common)?;
            let ds = run_generate_data(&scn, &common.out)?;
            println!("rows = {}, validated fraction = {}", ds.rows.len(), ds.validated_fraction());
        }
        Command::Train { common, dataset } => {
            let scn = load_scenario(&common)?;
            let path = dataset.unwrap_or_else(|| common.out.join(DATASET_FILE));
            let report = run_train(&scn, &path, &common.out)?;
            println!("final nll = {:?}", report.final_nll);
        }
        Command::AdaptRun { common, oracle, model } => {
            let scn = load_scenario(&common)?;
            let model_path = (!oracle).then(|| model.unwrap_or_else(|| common.out.join(MODEL_FILE)));
            let summary = run_adapt(&scn, model_path.as_deref(), &common.out)?;
            println!(
                "min_b0 = {}, parameter changes = {}",
                summary.min_b0, summary.parameter_changes
            );
        }
        Command::ValidateParam { common, state, params } => {
            let scn = load_scenario(&common)?;
            let report = run_validate_param(&scn, state.as_deref(), params.as_deref())?;
            let json = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
            println!("{json}");
        }
    }
    Ok(())
}

pub fn load_scenario(common: &Common) -> CliResult<Scenario> {
    if !common.config.is_file() {
        return Err(CliError::input(format!("config file not found: {}", common.config.display())));
    }
    let scn = ScenarioConfig::load(&common.config)
        .map_err(|e| ConfigError {
            message: format!("{}: {}", common.config.display(), e.message),
            ..e
        })?
        .resolve()?;
    Ok(match common.seed {
        Some(seed) => scn.with_seed(seed),
        None => scn,
    })
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

/// Metrics written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub model: String,
    pub barrier: String,
    pub seed: u64,
    pub duration: f64,
    pub dt: f64,
    pub steps: usize,
    pub min_b0: f64,
    pub min_inner_margin: f64,
    pub min_feasibility_margin: f64,
    /// Samples with `b_0 < -eps`.
    pub violations: usize,
    pub time_to_goal: Option<f64>,
    pub filter_active_fraction: f64,
    pub initial_params: ClassKParams,
    pub final_params: ClassKParams,
    pub parameter_changes: usize,
    pub events: usize,
    pub fallback_events: usize,
    pub frozen_events: usize,
}

fn summarize(scn: &Scenario, mode: &str, steps: &[StepRecord], log: Option<&AdaptationLog>) -> RunSummary {
    let min = |f: fn(&StepRecord) -> f64| steps.iter().map(f).fold(f64::INFINITY, f64::min);
    let eps = scn.adaptation.eps;
    let events = log.map_or(0, |l| l.events.len());
    let count = |o: EventOutcome| log.map_or(0, |l| l.events.iter().filter(|e| e.outcome == o).count());
    RunSummary {
        mode: mode.to_string(),
        model: scn.safety_loop.model.name().to_string(),
        barrier: scn.safety_loop.barrier.name().to_string(),
        seed: scn.seed(),
        duration: scn.duration(),
        dt: scn.dt(),
        steps: steps.len(),
        min_b0: min(StepRecord::b0),
        min_inner_margin: min(|s| s.inner_margin),
        min_feasibility_margin: min(|s| s.feasibility_margin),
        violations: steps.iter().filter(|s| s.b0() < -eps).count(),
        time_to_goal: time_to_reach(&scn.safety_loop, steps, &scn.reach_goal, scn.reach_tolerance()),
        filter_active_fraction: steps.iter().filter(|s| s.filter_active).count() as f64 / steps.len() as f64,
        initial_params: scn.params.clone(),
        final_params: steps.last().map_or_else(|| scn.params.clone(), |s| s.params.clone()),
        parameter_changes: log.map_or(0, AdaptationLog::parameter_changes),
        events,
        fallback_events: count(EventOutcome::Fallback),
        frozen_events: count(EventOutcome::Frozen),
    }
}

/// CSV with a fixed header per scenario:
/// `t, x_*, u_*, b_*, feasibility_margin, inner_margin, k_*, filter_active, event`.
pub fn write_trace(path: &Path, steps: &[StepRecord], n: usize, m: usize, r: usize) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend((0..r).map(|i| format!("b_{i}")));
    header.push("feasibility_margin".into());
    header.push("inner_margin".into());
    header.extend((1..=r).map(|i| format!("k_{i}")));
    header.push("filter_active".into());
    header.push("event".into());
    let write = |w: &mut BufWriter<File>, line: String| writeln!(w, "{line}").map_err(|e| CliError::io(path, e));
    write(&mut w, header.join(","))?;
    for s in steps {
        let mut cells = vec![s.t.to_string()];
        cells.extend(s.state.iter().map(f64::to_string));
        cells.extend(s.input.iter().map(f64::to_string));
        cells.extend(s.stack.iter().map(f64::to_string));
        cells.push(s.feasibility_margin.to_string());
        cells.push(s.inner_margin.to_string());
        cells.extend(s.params.as_slice().iter().map(f64::to_string));
        cells.push(u8::from(s.filter_active).to_string());
        cells.push(u8::from(s.event).to_string());
        write(&mut w, cells.join(","))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
}

fn write_outputs(scn: &Scenario, out: &Path, steps: &[StepRecord], summary: &RunSummary) -> CliResult<()> {
    let lp = &scn.safety_loop;
    write_trace(
        &out.join(TRACE_FILE),
        steps,
        lp.model.state_dim(),
        lp.model.input_dim(),
        scn.params.len(),
    )?;
    write_json(&out.join(SUMMARY_FILE), summary)
}

pub fn run_simulate(scn: &Scenario, out: &Path) -> CliResult<RunSummary> {
    prepare_out(out)?;
    let steps = simulate_fixed(&scn.safety_loop, &scn.params, &scn.goal, &scn.x0, scn.duration(), scn.dt())?;
    let summary = summarize(scn, "fixed", &steps, None);
    write_outputs(scn, out, &steps, &summary)?;
    Ok(summary)
}

pub fn run_generate_data(scn: &Scenario, out: &Path) -> CliResult<Dataset> {
    let (rows, scenarios, params) = scn
        .dataset_samplers()
        .ok_or_else(|| CliError::from(ConfigError {
            field: Some("dataset".into()),
            message: "section is required for generate-data".into(),
        }))?;
    prepare_out(out)?;
    let mut ds = generate_dataset(
        &scn.safety_loop,
        &scenarios,
        &params,
        rows,
        &scn.adaptation.validation(),
        scn.seed(),
    )?;
    ds.meta.config = serde_json::to_value(&scn.config).map_err(CliError::runtime)?;
    ds.save(&out.join(DATASET_FILE))?;
    Ok(ds)
}

pub fn run_train(scn: &Scenario, dataset: &Path, out: &Path) -> CliResult<TrainingReport> {
    if !dataset.is_file() {
        return Err(CliError::input(format!("dataset not found: {}", dataset.display())));
    }
    let ds = Dataset::load(dataset)?;
    let expected = scn.safety_loop.model.state_dim() + scn.params.len();
    if ds.feature_dim() != expected {
        return Err(CliError::input(format!(
            "{}: dataset has {} features, scenario expects {expected}",
            dataset.display(),
            ds.feature_dim()
        )));
    }
    prepare_out(out)?;
    let features: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.features.clone()).collect();
    let targets: Vec<Vec<f64>> = ds.rows.iter().map(|r| r.targets().to_vec()).collect();
    let (model, report) = train_with_report(&features, &targets, ds.meta.normalization.clone(), &scn.training)?;
    model.save(&out.join(MODEL_FILE))?;
    write_json(&out.join(TRAINING_REPORT_FILE), &report)?;
    Ok(report)
}

/// `model = None` scores candidates with the validation oracle.
pub fn run_adapt(scn: &Scenario, model: Option<&Path>, out: &Path) -> CliResult<RunSummary> {
    let ensemble = match model {
        None => None,
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::input(format!("model file not found: {}", path.display())));
            }
            let m = EnsembleModel::load(path)?;
            let expected = scn.safety_loop.model.state_dim() + scn.params.len();
            if m.feature_dim() != expected {
                return Err(CliError::input(format!(
                    "{}: model takes {} features, scenario expects {expected}",
                    path.display(),
                    m.feature_dim()
                )));
            }
            Some(m)
        }
    };
    let scorer: Box<dyn CandidateScorer + '_> = match &ensemble {
        Some(m) => Box::new(EnsembleScorer { model: m }),
        None => Box::new(OracleScorer),
    };
    prepare_out(out)?;
    let log = adapt_run(
        &scn.safety_loop,
        &scn.params,
        scorer.as_ref(),
        &scn.goal,
        &scn.x0,
        scn.duration(),
        &scn.adaptation,
    )?;
    let log_path = out.join(ADAPTATION_LOG_FILE);
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut w = BufWriter::new(file);
    log.write_jsonl(&mut w).map_err(|e| CliError::io(&log_path, e))?;
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    let summary = summarize(scn, &format!("adaptive_{}", scorer.name()), &log.steps, Some(&log));
    write_outputs(scn, out, &log.steps, &summary)?;
    Ok(summary)
}

pub fn run_validate_param(scn: &Scenario, state: Option<&[f64]>, params: Option<&[f64]>) -> CliResult<ValidationReport> {
    let lp = &scn.safety_loop;
    let x = match state {
        Some(v) if v.len() != lp.model.state_dim() => {
            return Err(CliError::input(format!(
                "--state has {} entries, model {} has {}",
                v.len(),
                lp.model.name(),
                lp.model.state_dim()
            )))
        }
        Some(v) => StateVec::from_column_slice(v),
        None => scn.x0.clone(),
    };
    let k = match params {
        Some(p) => ClassKParams::new(p.to_vec())?,
        None => scn.params.clone(),
    };
    Ok(validate_horizon(
        &lp.spec(&k),
        &lp.policy(&k, &scn.goal),
        &x,
        &scn.goal,
        &scn.adaptation.validation(),
    )?)
}
