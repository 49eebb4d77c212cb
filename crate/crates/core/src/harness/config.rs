//! TOML scenario files.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptationConfig;
use crate::barrier::{CandidateBarrier, ClassKParams, LowerBound, UpperBound};
use crate::dynamics::{DoubleIntegrator, DynamicsModel, Quadplane, StateVec, Unicycle, DEFAULT_DT};
use crate::penn::TrainConfig;
use crate::qp_filter::{PdGains, SafetyLoop};
use crate::validator::{LogUniformParams, UniformScenario};

/// A configuration problem, with the offending field when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(field: &str, message: impl ToString) -> Self {
        Self {
            field: Some(field.to_string()),
            message: message.to_string(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub barrier: BarrierSection,
    #[serde(default)]
    pub adaptation: AdaptationSection,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub training: TrainingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// `double_integrator`, `unicycle` or `quadplane`.
    pub model: String,
    pub x0: Vec<f64>,
    pub goal: Vec<f64>,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub seed: u64,
    pub gains: GainsSection,
    /// Point whose goal distance defines time-to-goal; defaults to `goal`.
    #[serde(default)]
    pub reach_goal: Option<Vec<f64>>,
    #[serde(default = "default_reach_tolerance")]
    pub reach_tolerance: f64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_reach_tolerance() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSection {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    /// `upper_bound` (`limit - x[index]`) or `lower_bound` (`x[index] - limit`).
    pub kind: String,
    pub index: usize,
    pub limit: f64,
    pub params: Vec<f64>,
    /// Relative degree; must match the length of `params` when given.
    #[serde(default)]
    pub degree: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSection {
    pub kind: String,
    pub index: usize,
    pub limit: f64,
    pub params: Vec<f64>,
    #[serde(default)]
    pub degree: Option<usize>,
    /// Further barriers with fixed gains, filtered after the primary one.
    #[serde(default)]
    pub extra: Vec<BarrierSpec>,
}

impl BarrierSection {
    pub fn primary(&self) -> BarrierSpec {
        BarrierSpec {
            kind: self.kind.clone(),
            index: self.index,
            limit: self.limit,
            params: self.params.clone(),
            degree: self.degree,
        }
    }
}

/// [`AdaptationConfig`] without the seed, which comes from `[scenario]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub horizon: f64,
    pub period: f64,
    pub candidate_count: usize,
    pub spread: f64,
    pub epistemic_threshold: f64,
    pub beta: f64,
    pub eps: f64,
    pub confirm: bool,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        let d = AdaptationConfig::default();
        Self {
            horizon: d.horizon,
            period: d.period,
            candidate_count: d.candidate_count,
            spread: d.spread,
            epistemic_threshold: d.epistemic_threshold,
            beta: d.beta,
            eps: d.eps,
            confirm: d.confirm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub rows: usize,
    pub x0_lower: Vec<f64>,
    pub x0_upper: Vec<f64>,
    pub goal_lower: Vec<f64>,
    pub goal_upper: Vec<f64>,
    pub params_lower: Vec<f64>,
    pub params_upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub members: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch: d.batch,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            members: d.members,
            hidden: d.hidden,
        }
    }
}

/// A config with every name resolved and every invariant checked.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub safety_loop: SafetyLoop,
    pub params: ClassKParams,
    pub x0: StateVec,
    pub goal: StateVec,
    pub reach_goal: StateVec,
    pub adaptation: AdaptationConfig,
    pub training: TrainConfig,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let location = e.span().map(|span| {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                format!("line {line}, column {column}: ")
            });
            ConfigError {
                field: None,
                message: format!("{}{}", location.unwrap_or_default(), e.message().trim()),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(&path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::parse(&text)
    }

    pub fn resolve(self) -> Result<Scenario, ConfigError> {
        let s = &self.scenario;
        let model = model_by_name(&s.model)?;
        let n = model.state_dim();
        let vector = |field: &str, v: &[f64]| -> Result<StateVec, ConfigError> {
            if v.len() != n {
                return Err(ConfigError::at(
                    field,
                    format!("expected {n} entries for model {}, got {}", s.model, v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ConfigError::at(field, "entries must be finite"));
            }
            Ok(StateVec::from_column_slice(v))
        };
        let x0 = vector("scenario.x0", &s.x0)?;
        let goal = vector("scenario.goal", &s.goal)?;
        let reach_goal = match &s.reach_goal {
            Some(r) => vector("scenario.reach_goal", r)?,
            None => goal.clone(),
        };
        if !(s.duration > 0.0 && s.duration.is_finite()) {
            return Err(ConfigError::at("scenario.duration", "must be positive"));
        }
        if !(s.dt > 0.0 && s.dt <= s.duration) {
            return Err(ConfigError::at("scenario.dt", "must satisfy 0 < dt <= duration"));
        }
        if !(s.reach_tolerance >= 0.0) {
            return Err(ConfigError::at("scenario.reach_tolerance", "must be non-negative"));
        }
        let gains =
            PdGains::new(s.gains.kp, s.gains.kd).map_err(|e| ConfigError::at("scenario.gains", e))?;

        let (barrier, params) = barrier_from_spec(&self.barrier.primary(), n, "barrier")?;
        let mut safety_loop = SafetyLoop::new(Arc::clone(&model), barrier, gains);
        for (i, extra) in self.barrier.extra.iter().enumerate() {
            let (b, p) = barrier_from_spec(extra, n, &format!("barrier.extra[{i}]"))?;
            safety_loop = safety_loop.with_secondary(b, p);
        }

        let a = &self.adaptation;
        let adaptation = AdaptationConfig {
            horizon: a.horizon,
            period: a.period,
            candidate_count: a.candidate_count,
            spread: a.spread,
            epistemic_threshold: a.epistemic_threshold,
            beta: a.beta,
            eps: a.eps,
            dt: s.dt,
            seed: s.seed,
            confirm: a.confirm,
        };
        adaptation.check().map_err(|e| ConfigError::at("adaptation", e))?;

        if let Some(d) = &self.dataset {
            for (field, v) in [
                ("dataset.x0_lower", &d.x0_lower),
                ("dataset.x0_upper", &d.x0_upper),
                ("dataset.goal_lower", &d.goal_lower),
                ("dataset.goal_upper", &d.goal_upper),
            ] {
                vector(field, v)?;
            }
            if d.params_lower.len() != params.len() {
                return Err(ConfigError::at(
                    "dataset.params_lower",
                    format!("expected {} entries (barrier degree), got {}", params.len(), d.params_lower.len()),
                ));
            }
            LogUniformParams::new(d.params_lower.clone(), d.params_upper.clone())
                .map_err(|e| ConfigError::at("dataset.params_lower", e))?;
        }

        let t = &self.training;
        let training = TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            members: t.members,
            hidden: t.hidden.clone(),
            seed: s.seed,
        };
        if training.members < 2 {
            return Err(ConfigError::at("training.members", "an ensemble needs at least 2 members"));
        }
        Ok(Scenario {
            safety_loop,
            params,
            x0,
            goal,
            reach_goal,
            adaptation,
            training,
            config: self,
        })
    }
}

impl Scenario {
    pub fn seed(&self) -> u64 {
        self.config.scenario.seed
    }

    /// Replace the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.scenario.seed = seed;
        self.adaptation.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn duration(&self) -> f64 {
        self.config.scenario.duration
    }

    pub fn dt(&self) -> f64 {
        self.config.scenario.dt
    }

    pub fn reach_tolerance(&self) -> f64 {
        self.config.scenario.reach_tolerance
    }

    pub fn dataset_samplers(&self) -> Option<(usize, UniformScenario, LogUniformParams)> {
        let d = self.config.dataset.as_ref()?;
        let scenario = UniformScenario {
            x0_lower: d.x0_lower.clone(),
            x0_upper: d.x0_upper.clone(),
            goal_lower: d.goal_lower.clone(),
            goal_upper: d.goal_upper.clone(),
        };
        let params = LogUniformParams::new(d.params_lower.clone(), d.params_upper.clone()).ok()?;
        Some((d.rows, scenario, params))
    }
}

pub fn model_by_name(name: &str) -> Result<Arc<dyn DynamicsModel>, ConfigError> {
    match name {
        "double_integrator" => Ok(Arc::new(DoubleIntegrator::default())),
        "unicycle" => Ok(Arc::new(Unicycle::default())),
        "quadplane" => Ok(Arc::new(Quadplane::default())),
        other => Err(ConfigError::at(
            "scenario.model",
            format!("unknown model {other:?} (expected double_integrator, unicycle or quadplane)"),
        )),
    }
}

fn barrier_from_spec(
    spec: &BarrierSpec,
    state_dim: usize,
    field: &str,
) -> Result<(Arc<dyn CandidateBarrier>, ClassKParams), ConfigError> {
    if spec.index >= state_dim {
        return Err(ConfigError::at(
            &format!("{field}.index"),
            format!("index {} out of range for a {state_dim}-dimensional state", spec.index),
        ));
    }
    if !spec.limit.is_finite() {
        return Err(ConfigError::at(&format!("{field}.limit"), "must be finite"));
    }
    let barrier: Arc<dyn CandidateBarrier> = match spec.kind.as_str() {
        "upper_bound" => Arc::new(UpperBound {
            index: spec.index,
            limit: spec.limit,
        }),
        "lower_bound" => Arc::new(LowerBound {
            index: spec.index,
            limit: spec.limit,
        }),
        other => {
            return Err(ConfigError::at(
                &format!("{field}.kind"),
                format!("unknown barrier {other:?} (expected upper_bound or lower_bound)"),
            ))
        }
    };
    let params =
        ClassKParams::new(spec.params.clone()).map_err(|e| ConfigError::at(&format!("{field}.params"), e))?;
    if let Some(r) = spec.degree {
        if r != params.len() {
            return Err(ConfigError::at(
                &format!("{field}.degree"),
                format!("degree {r} does not match {} class-K coefficients", params.len()),
            ));
        }
    }
    Ok((barrier, params))
}
