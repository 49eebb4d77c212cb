//! Online adaptation of the class-K gains: every adaptation period, propose
//! candidates around the current gains, score them, gate them on predicted
//! safety and ensemble disagreement, select the most promising one, and
//! confirm it with a validation rollout before adopting it.
//!
//! The period must be shorter than the validation horizon, so the gains in
//! use are always covered by a validation that has not yet expired.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::ClassKParams;
use crate::dynamics::{step, StateVec, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::penn::{EnsembleModel, EnsemblePrediction, TargetPrediction};
use crate::qp_filter::SafetyLoop;
use crate::validator::{candidate_features, validate_horizon, ValidationReport, ValidationSettings, MEMBERSHIP_TOL};

/// Progress means closer than this are treated as tied.
pub const PROGRESS_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    /// Validation horizon `T`, seconds.
    pub horizon: f64,
    /// Time between adaptation events, seconds. Must be below `horizon`.
    pub period: f64,
    pub candidate_count: usize,
    /// Standard deviation of the log-space proposal perturbation.
    pub spread: f64,
    /// Largest admissible epistemic variance of the safety prediction.
    pub epistemic_threshold: f64,
    /// Standard deviations of safety margin demanded by the gate.
    pub beta: f64,
    pub eps: f64,
    pub dt: f64,
    pub seed: u64,
    /// Confirm the selected candidate with a rollout before adopting it.
    /// Disabling this is only meant for ablations.
    pub confirm: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            horizon: 2.0,
            period: 0.5,
            candidate_count: 8,
            spread: 0.3,
            epistemic_threshold: 0.05,
            beta: 1.0,
            eps: 1e-3,
            dt: DEFAULT_DT,
            seed: 0,
            confirm: true,
        }
    }
}

impl AdaptationConfig {
    pub fn check(&self) -> Result<()> {
        self.validation().check()?;
        if !(self.period > 0.0 && self.period < self.horizon) {
            return Err(Error::InvalidParameter(format!(
                "adaptation period must satisfy 0 < period < horizon, got period = {} and horizon = {}",
                self.period, self.horizon
            )));
        }
        if self.period_steps() as f64 * self.dt >= self.horizon {
            return Err(Error::InvalidParameter(
                "adaptation period rounded to whole steps reaches the horizon".into(),
            ));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidParameter(format!("proposal spread must be non-negative, got {}", self.spread)));
        }
        if !(self.epistemic_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epistemic threshold must be positive, got {}",
                self.epistemic_threshold
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn validation(&self) -> ValidationSettings {
        ValidationSettings {
            horizon: self.horizon,
            dt: self.dt,
            eps: self.eps,
        }
    }

    /// Simulation steps between events.
    pub fn period_steps(&self) -> usize {
        ((self.period / self.dt).round() as usize).max(1)
    }
}

/// The current gains followed by `candidate_count` multiplicative log-normal
/// perturbations, drawn from stream `event` of the configured seed.
pub fn propose_candidates(current: &ClassKParams, config: &AdaptationConfig, event: u64) -> Vec<ClassKParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(event);
    let mut out = Vec::with_capacity(config.candidate_count + 1);
    out.push(current.clone());
    for _ in 0..config.candidate_count {
        let coeffs = current
            .as_slice()
            .iter()
            .map(|k| {
                let z: f64 = StandardNormal.sample(&mut rng);
                k * (config.spread * z).exp()
            })
            .collect();
        // exp never returns a non-positive value for finite input
        out.push(ClassKParams::new(coeffs).expect("positive perturbation"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub epistemic_pass: bool,
    pub safety_pass: bool,
}

impl GateDecision {
    pub fn accepted(&self) -> bool {
        self.epistemic_pass && self.safety_pass
    }
}

/// In-distribution (low ensemble disagreement) and confidently safe.
pub fn gate_one(prediction: &EnsemblePrediction, config: &AdaptationConfig) -> GateDecision {
    let s = prediction.safety();
    GateDecision {
        epistemic_pass: s.epistemic_var <= config.epistemic_threshold,
        safety_pass: s.mean - config.beta * s.total_var().sqrt() >= 0.0,
    }
}

/// Indices of accepted predictions.
pub fn uncertainty_gate(predictions: &[EnsemblePrediction], config: &AdaptationConfig) -> Vec<usize> {
    predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| gate_one(p, config).accepted())
        .map(|(i, _)| i)
        .collect()
}

/// Position in `candidates` of the predicted-progress maximizer. Near-ties go
/// to the candidate closest to `current` in log space, then to the lowest
/// position.
pub fn select_parameter(
    candidates: &[ClassKParams],
    predictions: &[EnsemblePrediction],
    current: &ClassKParams,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no accepted candidate to select from".into()));
    }
    if candidates.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            what: "predictions",
            expected: candidates.len(),
            got: predictions.len(),
        });
    }
    let best = predictions
        .iter()
        .map(|p| p.progress().mean)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut chosen: Option<(usize, f64)> = None;
    for (i, (c, p)) in candidates.iter().zip(predictions).enumerate() {
        if p.progress().mean < best - PROGRESS_TIE_TOL {
            continue;
        }
        let d = c.log_distance(current);
        if chosen.is_none_or(|(_, best_d)| d < best_d) {
            chosen = Some((i, d));
        }
    }
    chosen
        .map(|(i, _)| i)
        .ok_or(Error::NonFinite("progress predictions"))
}

/// Predicts validation labels for a candidate at the current state.
pub trait CandidateScorer: Sync {
    fn name(&self) -> &str;
    fn score(
        &self,
        lp: &SafetyLoop,
        x: &StateVec,
        goal: &StateVec,
        params: &ClassKParams,
        settings: &ValidationSettings,
    ) -> Result<EnsemblePrediction>;
}

/// Scores with the trained ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleScorer<'a> {
    pub model: &'a EnsembleModel,
}

impl CandidateScorer for EnsembleScorer<'_> {
    fn name(&self) -> &str {
        "ensemble"
    }

    fn score(
        &self,
        _lp: &SafetyLoop,
        x: &StateVec,
        goal: &StateVec,
        params: &ClassKParams,
        _settings: &ValidationSettings,
    ) -> Result<EnsemblePrediction> {
        self.model.predict(&candidate_features(x, goal, params))
    }
}

/// Scores by running the validator itself: zero variance, safety label
/// `max(safety_target, 0)` when validated and `-1` otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl CandidateScorer for OracleScorer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(
        &self,
        lp: &SafetyLoop,
        x: &StateVec,
        goal: &StateVec,
        params: &ClassKParams,
        settings: &ValidationSettings,
    ) -> Result<EnsemblePrediction> {
        let (safety, progress) = match validate_horizon(&lp.spec(params), &lp.policy(params, goal), x, goal, settings) {
            Ok(r) if r.validated => (r.safety_target.max(0.0), r.progress_target),
            Ok(r) => (-1.0, r.progress_target),
            Err(Error::Precondition(_)) => (-1.0, 0.0),
            Err(e) => return Err(e),
        };
        let exact = |mean| TargetPrediction {
            mean,
            aleatoric_var: 0.0,
            epistemic_var: 0.0,
        };
        Ok(EnsemblePrediction {
            targets: vec![exact(safety), exact(progress)],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventOutcome {
    /// A gated candidate passed confirmation (or confirmation is disabled).
    Adopted,
    /// No candidate made it; the current gains were re-validated.
    Fallback,
    /// Nothing validated; the current gains stay in use unverified.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub params: ClassKParams,
    pub inner_margin: f64,
    /// `None` when the state is outside the candidate's inner safe set.
    pub prediction: Option<EnsemblePrediction>,
    pub gate: Option<GateDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub index: u64,
    pub t: f64,
    pub state: Vec<f64>,
    pub previous: ClassKParams,
    pub candidates: Vec<CandidateRecord>,
    pub accepted: usize,
    /// Position in `candidates` of the selected candidate.
    pub selected: Option<usize>,
    /// Confirmation of the selected candidate, when it was run.
    pub confirmation: Option<ValidationReport>,
    pub outcome: EventOutcome,
    pub adopted: ClassKParams,
    /// The validation backing `adopted` from `state` at `t`.
    pub report: Option<ValidationReport>,
}

impl EventRecord {
    pub fn changed(&self) -> bool {
        self.adopted != self.previous
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub nominal: Vec<f64>,
    /// `b_0 .. b_{r-1}` of the primary barrier.
    pub stack: Vec<f64>,
    pub inner_margin: f64,
    pub feasibility_margin: f64,
    pub params: ClassKParams,
    pub filter_active: bool,
    pub event: bool,
}

impl StepRecord {
    pub fn b0(&self) -> f64 {
        self.stack[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Event(EventRecord),
    Step(StepRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationLog {
    pub events: Vec<EventRecord>,
    pub steps: Vec<StepRecord>,
}

impl AdaptationLog {
    /// One JSON object per line, events placed before the step at the same time.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut events = self.events.iter().peekable();
        for s in &self.steps {
            while let Some(e) = events.next_if(|e| e.t <= s.t) {
                writeln!(out, "{}", serde_json::to_string(&LogRecord::Event(e.clone()))?)?;
            }
            writeln!(out, "{}", serde_json::to_string(&LogRecord::Step(s.clone()))?)?;
        }
        for e in events {
            writeln!(out, "{}", serde_json::to_string(&LogRecord::Event(e.clone()))?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut log = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogRecord::Event(e) => log.events.push(e),
                LogRecord::Step(s) => log.steps.push(s),
            }
        }
        Ok(log)
    }

    pub fn min_b0(&self) -> f64 {
        self.steps.iter().map(StepRecord::b0).fold(f64::INFINITY, f64::min)
    }

    pub fn parameter_changes(&self) -> usize {
        self.events.iter().filter(|e| e.changed()).count()
    }

    /// Largest gap between consecutive event times.
    pub fn max_event_gap(&self) -> f64 {
        self.events
            .windows(2)
            .map(|w| w[1].t - w[0].t)
            .fold(0.0, f64::max)
    }

    /// Every adopted or fallback gain vector carries a passing validation
    /// taken from the event state.
    pub fn adoptions_validated(&self) -> bool {
        self.events.iter().all(|e| match e.outcome {
            EventOutcome::Frozen => true,
            _ => e.report.as_ref().is_some_and(|r| r.validated),
        })
    }

    pub fn frozen_events(&self) -> usize {
        self.events.iter().filter(|e| e.outcome == EventOutcome::Frozen).count()
    }
}

/// First logged time with goal distance to `target` at most `tolerance`.
pub fn time_to_reach(lp: &SafetyLoop, steps: &[StepRecord], target: &StateVec, tolerance: f64) -> Option<f64> {
    steps
        .iter()
        .find(|s| lp.model.goal_distance(&StateVec::from_column_slice(&s.state), target) <= tolerance)
        .map(|s| s.t)
}

/// Logged steps outside the inner safe set of `initial` yet inside that of
/// the gains in use at the time.
pub fn reshaping_witnesses(lp: &SafetyLoop, steps: &[StepRecord], initial: &ClassKParams) -> Result<Vec<usize>> {
    let spec0 = lp.spec(initial);
    let mut out = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        if s.params == *initial || s.inner_margin < 0.0 {
            continue;
        }
        let x = StateVec::from_column_slice(&s.state);
        if spec0.evaluate(&x)?.stack.inner_margin() < 0.0 {
            out.push(i);
        }
    }
    Ok(out)
}

fn record_step(
    lp: &SafetyLoop,
    params: &ClassKParams,
    goal: &StateVec,
    x: &StateVec,
    t: f64,
    event: bool,
) -> Result<(StepRecord, StateVec)> {
    let spec = lp.spec(params);
    let eval = spec.evaluate(x)?;
    let decision = lp.policy(params, goal).decide(x)?;
    let record = StepRecord {
        t,
        state: x.as_slice().to_vec(),
        input: decision.input.as_slice().to_vec(),
        nominal: decision.nominal.as_slice().to_vec(),
        inner_margin: eval.stack.inner_margin(),
        feasibility_margin: eval.constraint.sup(lp.model.input_box()),
        stack: eval.stack.values,
        params: params.clone(),
        filter_active: decision.modified,
        event,
    };
    Ok((record, decision.input))
}

fn sim_steps(duration: f64, dt: f64) -> Result<usize> {
    if !(duration > 0.0 && duration.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "duration and dt must be positive, got duration = {duration}, dt = {dt}"
        )));
    }
    Ok(((duration / dt).round() as usize).max(1))
}

/// Closed loop with fixed gains. Returns one record per sample, endpoints
/// included; the last record's input is not applied.
pub fn simulate_fixed(
    lp: &SafetyLoop,
    params: &ClassKParams,
    goal: &StateVec,
    x0: &StateVec,
    duration: f64,
    dt: f64,
) -> Result<Vec<StepRecord>> {
    let n = sim_steps(duration, dt)?;
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(n + 1);
    for s in 0..=n {
        let (rec, u) = record_step(lp, params, goal, &x, s as f64 * dt, false)?;
        out.push(rec);
        if s < n {
            x = step(lp.model.as_ref(), &x, &u, dt)?;
        }
    }
    Ok(out)
}

/// Closed loop with online adaptation. `params0` must be validated from `x0`.
pub fn adapt_run(
    lp: &SafetyLoop,
    params0: &ClassKParams,
    scorer: &dyn CandidateScorer,
    goal: &StateVec,
    x0: &StateVec,
    duration: f64,
    config: &AdaptationConfig,
) -> Result<AdaptationLog> {
    config.check()?;
    let settings = config.validation();
    let n = sim_steps(duration, config.dt)?;
    let margin0 = lp.spec(params0).evaluate(x0)?.stack.inner_margin();
    if margin0 < -MEMBERSHIP_TOL {
        return Err(Error::Precondition(format!(
            "initial state is outside the initial inner safe set (inner margin {margin0})"
        )));
    }
    let initial = validate_horizon(&lp.spec(params0), &lp.policy(params0, goal), x0, goal, &settings)?;
    if !initial.validated {
        return Err(Error::Precondition(format!(
            "initial gains are not validated from the initial state (min inner margin {}, min feasibility margin {})",
            initial.min_inner_margin, initial.min_feasibility_margin
        )));
    }

    let period = config.period_steps();
    let mut log = AdaptationLog::default();
    let mut params = params0.clone();
    let mut x = x0.clone();
    for s in 0..=n {
        let t = s as f64 * config.dt;
        let is_event = s % period == 0 && s < n;
        if is_event {
            let record = adaptation_event(lp, &params, scorer, goal, &x, t, (s / period) as u64, config)?;
            params = record.adopted.clone();
            log.events.push(record);
        }
        let (rec, u) = record_step(lp, &params, goal, &x, t, is_event)?;
        log.steps.push(rec);
        if s < n {
            x = step(lp.model.as_ref(), &x, &u, config.dt)?;
        }
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn adaptation_event(
    lp: &SafetyLoop,
    current: &ClassKParams,
    scorer: &dyn CandidateScorer,
    goal: &StateVec,
    x: &StateVec,
    t: f64,
    index: u64,
    config: &AdaptationConfig,
) -> Result<EventRecord> {
    let settings = config.validation();
    let proposals = propose_candidates(current, config, index);
    let candidates = proposals
        .par_iter()
        .map(|p| -> Result<CandidateRecord> {
            let inner_margin = lp.spec(p).evaluate(x)?.stack.inner_margin();
            if inner_margin < -MEMBERSHIP_TOL {
                return Ok(CandidateRecord {
                    params: p.clone(),
                    inner_margin,
                    prediction: None,
                    gate: None,
                });
            }
            let prediction = scorer.score(lp, x, goal, p, &settings)?;
            let gate = gate_one(&prediction, config);
            Ok(CandidateRecord {
                params: p.clone(),
                inner_margin,
                prediction: Some(prediction),
                gate: Some(gate),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let accepted: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.gate.is_some_and(|g| g.accepted()))
        .map(|(i, _)| i)
        .collect();
    let selected = if accepted.is_empty() {
        None
    } else {
        let params: Vec<_> = accepted.iter().map(|&i| candidates[i].params.clone()).collect();
        let preds: Vec<_> = accepted
            .iter()
            .map(|&i| candidates[i].prediction.clone().expect("gated candidates are scored"))
            .collect();
        Some(accepted[select_parameter(&params, &preds, current)?])
    };

    let validate = |p: &ClassKParams| validate_horizon(&lp.spec(p), &lp.policy(p, goal), x, goal, &settings);
    let mut confirmation = None;
    let mut decided: Option<(EventOutcome, ClassKParams, Option<ValidationReport>)> = None;
    if let Some(i) = selected {
        let chosen = &candidates[i].params;
        if config.confirm {
            let report = validate(chosen)?;
            confirmation = Some(report.clone());
            if report.validated {
                decided = Some((EventOutcome::Adopted, chosen.clone(), Some(report)));
            }
        } else {
            decided = Some((EventOutcome::Adopted, chosen.clone(), None));
        }
    }
    let (outcome, adopted, report) = match decided {
        Some(d) => d,
        None => {
            let report = match validate(current) {
                Ok(r) => r,
                // the state left the current inner set; nothing to re-validate
                Err(Error::Precondition(_)) => {
                    return Ok(EventRecord {
                        index,
                        t,
                        state: x.as_slice().to_vec(),
                        previous: current.clone(),
                        candidates,
                        accepted: accepted.len(),
                        selected,
                        confirmation,
                        outcome: EventOutcome::Frozen,
                        adopted: current.clone(),
                        report: None,
                    })
                }
                Err(e) => return Err(e),
            };
            let outcome = if report.validated {
                EventOutcome::Fallback
            } else {
                EventOutcome::Frozen
            };
            (outcome, current.clone(), Some(report))
        }
    };
    Ok(EventRecord {
        index,
        t,
        state: x.as_slice().to_vec(),
        previous: current.clone(),
        candidates,
        accepted: accepted.len(),
        selected,
        confirmation,
        outcome,
        adopted,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::UpperBound;
    use crate::dynamics::DoubleIntegrator;
    use crate::qp_filter::PdGains;
    use std::sync::Arc;

    fn k(v: &[f64]) -> ClassKParams {
        ClassKParams::new(v.to_vec()).unwrap()
    }

    fn pred(safety: (f64, f64, f64), progress: f64) -> EnsemblePrediction {
        EnsemblePrediction {
            targets: vec![
                TargetPrediction {
                    mean: safety.0,
                    aleatoric_var: safety.1,
                    epistemic_var: safety.2,
                },
                TargetPrediction {
                    mean: progress,
                    aleatoric_var: 0.0,
                    epistemic_var: 0.0,
                },
            ],
        }
    }

    fn di_loop() -> SafetyLoop {
        SafetyLoop::new(
            Arc::new(DoubleIntegrator::default()),
            Arc::new(UpperBound { index: 0, limit: 1.0 }),
            PdGains::new(1.0, 1.5).unwrap(),
        )
    }

    #[test]
    fn proposals() {
        let cfg = AdaptationConfig {
            spread: 0.5,
            ..AdaptationConfig::default()
        };
        let c = propose_candidates(&k(&[1.0, 1.0]), &cfg, 3);
        assert_eq!(c.len(), 9);
        assert_eq!(c[0], k(&[1.0, 1.0]));
        assert!(c.iter().flat_map(|p| p.as_slice()).all(|v| *v > 0.0));
        assert_eq!(c, propose_candidates(&k(&[1.0, 1.0]), &cfg, 3));
        assert_ne!(c, propose_candidates(&k(&[1.0, 1.0]), &cfg, 4));

        let flat = AdaptationConfig {
            spread: 0.0,
            ..AdaptationConfig::default()
        };
        assert!(propose_candidates(&k(&[2.0, 0.5]), &flat, 0).iter().all(|p| *p == k(&[2.0, 0.5])));

        let none = AdaptationConfig {
            candidate_count: 0,
            ..AdaptationConfig::default()
        };
        assert_eq!(propose_candidates(&k(&[2.0]), &none, 0), vec![k(&[2.0])]);
    }

    #[test]
    fn gate_examples() {
        let cfg = AdaptationConfig {
            epistemic_threshold: 0.01,
            beta: 0.0,
            ..AdaptationConfig::default()
        };
        assert!(uncertainty_gate(&[pred((1.0, 0.0, 0.5), 0.0), pred((1.0, 0.0, 0.2), 0.0)], &cfg).is_empty());
        assert_eq!(uncertainty_gate(&[pred((0.1, 0.0, 0.001), 0.0)], &cfg), vec![0]);

        let strict = AdaptationConfig {
            beta: 2.0,
            epistemic_threshold: 1.0,
            ..cfg
        };
        // 0.3 - 2 sqrt(0.04) = -0.1
        let g = gate_one(&pred((0.3, 0.03, 0.01), 0.0), &strict);
        assert!(g.epistemic_pass && !g.safety_pass);
    }

    #[test]
    fn selection_examples() {
        let cur = k(&[1.0, 1.0]);
        assert_eq!(select_parameter(&[k(&[2.0, 2.0])], &[pred((1.0, 0.0, 0.0), 0.1)], &cur).unwrap(), 0);
        assert_eq!(
            select_parameter(
                &[k(&[2.0, 2.0]), k(&[3.0, 3.0])],
                &[pred((1.0, 0.0, 0.0), 0.5), pred((1.0, 0.0, 0.0), 0.7)],
                &cur
            )
            .unwrap(),
            1
        );
        let near = k(&[0.1f64.exp(), 1.0]);
        let far = k(&[0.2f64.exp(), 1.0]);
        assert_eq!(
            select_parameter(
                &[far.clone(), near.clone()],
                &[pred((1.0, 0.0, 0.0), 0.5), pred((1.0, 0.0, 0.0), 0.5 + 1e-12)],
                &cur
            )
            .unwrap(),
            1
        );
        assert_eq!(
            select_parameter(
                &[near.clone(), near],
                &[pred((1.0, 0.0, 0.0), 0.5), pred((1.0, 0.0, 0.0), 0.5)],
                &cur
            )
            .unwrap(),
            0
        );
        assert!(select_parameter(&[], &[], &cur).is_err());
    }

    #[test]
    fn schedule_must_fit_in_horizon() {
        for period in [2.0, 3.0, 0.0] {
            let cfg = AdaptationConfig {
                period,
                ..AdaptationConfig::default()
            };
            assert!(cfg.check().is_err(), "period {period}");
        }
        assert!(AdaptationConfig::default().check().is_ok());
    }

    #[test]
    fn precondition_names_the_margin() {
        let lp = di_loop();
        let goal = StateVec::from_column_slice(&[2.0, 0.0]);
        let x0 = StateVec::from_column_slice(&[0.5, 0.9]);
        let err = adapt_run(&lp, &k(&[0.5, 0.5]), &OracleScorer, &goal, &x0, 1.0, &AdaptationConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("inner margin"), "{err}");
    }

    #[test]
    fn oracle_run_is_safe_and_adapts() {
        let lp = di_loop();
        let goal = StateVec::from_column_slice(&[2.0, 0.0]);
        let x0 = StateVec::from_column_slice(&[0.0, 0.0]);
        let cfg = AdaptationConfig::default();
        let log = adapt_run(&lp, &k(&[0.5, 0.5]), &OracleScorer, &goal, &x0, 10.0, &cfg).unwrap();
        assert!(log.min_b0() >= -1e-3);
        assert!(log.parameter_changes() >= 1);
        assert!(log.max_event_gap() < cfg.horizon);
        assert!(log.adoptions_validated());
        assert_eq!(log.steps.len(), 1001);
        assert_eq!(log.events.len(), 20);

        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = AdaptationLog::read_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, log);
    }
}
