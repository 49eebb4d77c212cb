//! Pointwise safety filter: the input closest to a nominal command that keeps
//! `b_r(x, u) >= 0` inside the input box.
//!
//! The program `min |u - u_nom|^2  s.t.  offset + slope . u >= 0,  u in box`
//! is solved exactly by enumerating active sets. Each coordinate is free or
//! pinned to one of its bounds, and the halfspace is active or not; the optimum
//! is the closest feasible point among those candidates. With `m <= 3` inputs
//! that is at most 27 face combinations.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::barrier::{CandidateBarrier, ClassKParams};
use crate::dynamics::{clamp_input, DynamicsModel, InputBox, InputVec, StateVec};
use crate::error::{Error, Result};
use crate::iccbf::{AffineConstraint, IccbfSpec};

/// Feasibility tolerance of active-set candidates.
const FEAS_TOL: f64 = 1e-12;

/// Proportional and derivative gains of the nominal tracking controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

impl PdGains {
    pub fn new(kp: f64, kd: f64) -> Result<Self> {
        if !(kp > 0.0 && kd > 0.0 && kp.is_finite() && kd.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "PD gains must be positive, got kp = {kp}, kd = {kd}"
            )));
        }
        Ok(Self { kp, kd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub input: InputVec,
    pub modified: bool,
    /// `-(best achievable b_r)` when no admissible input satisfies the
    /// constraint, zero otherwise.
    pub slack_used: f64,
    pub constraint_value: f64,
}

/// A state-feedback law.
pub trait Policy: Send + Sync {
    fn input(&self, x: &StateVec) -> Result<InputVec>;
}

impl<F> Policy for F
where
    F: Fn(&StateVec) -> Result<InputVec> + Send + Sync,
{
    fn input(&self, x: &StateVec) -> Result<InputVec> {
        self(x)
    }
}

/// Clamped PD tracking input.
pub fn nominal_pd(
    model: &dyn DynamicsModel,
    goal: &StateVec,
    x: &StateVec,
    gains: &PdGains,
) -> InputVec {
    clamp_input(model.input_box(), &model.tracking_input(goal, x, gains))
}

pub fn safety_filter(spec: &IccbfSpec, x: &StateVec, u_nom: &InputVec) -> Result<FilterResult> {
    let bx = spec.model().input_box();
    bx.check_contains(u_nom)?;
    let constraint = spec.evaluate(x)?.constraint;
    Ok(project_onto_constraint(&constraint, bx, u_nom))
}

/// Minimum-deviation projection of `u_nom` onto `{u in box | c(u) >= 0}`.
/// Infeasibility is soft-reported through `slack_used`.
pub fn project_onto_constraint(
    constraint: &AffineConstraint,
    bx: &InputBox,
    u_nom: &InputVec,
) -> FilterResult {
    let nominal_value = constraint.value(u_nom);
    if nominal_value >= 0.0 {
        return FilterResult {
            input: u_nom.clone(),
            modified: false,
            slack_used: 0.0,
            constraint_value: nominal_value,
        };
    }

    let best = constraint.sup(bx);
    if best < 0.0 {
        if constraint.slope.iter().all(|s| *s == 0.0) {
            // no input has any effect
            return FilterResult {
                input: u_nom.clone(),
                modified: false,
                slack_used: -constraint.offset,
                constraint_value: constraint.offset,
            };
        }
        let vertex = constraint.maximizer(bx, u_nom);
        let value = constraint.value(&vertex);
        return FilterResult {
            input: vertex,
            modified: true,
            slack_used: -best,
            constraint_value: value,
        };
    }

    let input = active_set_projection(constraint, bx, u_nom)
        .unwrap_or_else(|| constraint.maximizer(bx, u_nom));
    let constraint_value = constraint.value(&input);
    FilterResult {
        input,
        modified: true,
        slack_used: 0.0,
        constraint_value,
    }
}

#[derive(Clone, Copy)]
enum Face {
    Free,
    Lower,
    Upper,
}

fn active_set_projection(c: &AffineConstraint, bx: &InputBox, u_nom: &InputVec) -> Option<InputVec> {
    let m = u_nom.len();
    let combos = 3usize.pow(m as u32);
    let mut faces = vec![Face::Free; m];
    let mut best: Option<(f64, InputVec)> = None;
    let mut consider = |u: InputVec| {
        let inside = u
            .iter()
            .zip(bx.lower().iter().zip(bx.upper()))
            .all(|(v, (lo, hi))| *v >= lo - FEAS_TOL && *v <= hi + FEAS_TOL);
        if !inside || c.value(&u) < -FEAS_TOL {
            return;
        }
        let u = clamp_input(bx, &u);
        let dist = (&u - u_nom).norm_squared();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, u));
        }
    };

    for code in 0..combos {
        let mut rem = code;
        for face in faces.iter_mut() {
            *face = match rem % 3 {
                0 => Face::Free,
                1 => Face::Lower,
                _ => Face::Upper,
            };
            rem /= 3;
        }
        let mut u = u_nom.clone();
        let mut free_norm = 0.0;
        for (j, face) in faces.iter().enumerate() {
            match face {
                Face::Free => free_norm += c.slope[j] * c.slope[j],
                Face::Lower => u[j] = bx.lower()[j],
                Face::Upper => u[j] = bx.upper()[j],
            }
        }
        // halfspace inactive
        consider(u.clone());
        // halfspace active: move free coordinates along the slope
        if free_norm > 0.0 {
            let lambda = -c.value(&u) / free_norm;
            for (j, face) in faces.iter().enumerate() {
                if matches!(face, Face::Free) {
                    u[j] += lambda * c.slope[j];
                }
            }
            consider(u);
        }
    }
    best.map(|(_, u)| u)
}

/// Nominal PD followed by the safety filter of the primary barrier, then of
/// any secondary barriers in order. Sequential filtering is exact when all
/// constraints push the same input coordinates in the same direction; in
/// general it is a feasible but not jointly optimal selection.
#[derive(Debug, Clone)]
pub struct FilteredPolicy {
    primary: IccbfSpec,
    secondary: Vec<IccbfSpec>,
    goal: StateVec,
    gains: PdGains,
}

/// One decision of a [`FilteredPolicy`] with diagnostics.
#[derive(Debug, Clone)]
pub struct PolicyDecision {
    pub nominal: InputVec,
    pub input: InputVec,
    /// Result of the primary filter.
    pub primary: FilterResult,
    /// Whether any filter changed its input.
    pub modified: bool,
}

impl FilteredPolicy {
    pub fn new(primary: IccbfSpec, secondary: Vec<IccbfSpec>, goal: StateVec, gains: PdGains) -> Self {
        Self {
            primary,
            secondary,
            goal,
            gains,
        }
    }

    pub fn primary(&self) -> &IccbfSpec {
        &self.primary
    }

    pub fn goal(&self) -> &StateVec {
        &self.goal
    }

    pub fn decide(&self, x: &StateVec) -> Result<PolicyDecision> {
        let nominal = nominal_pd(self.primary.model().as_ref(), &self.goal, x, &self.gains);
        let primary = safety_filter(&self.primary, x, &nominal)?;
        let mut input = primary.input.clone();
        let mut modified = primary.modified;
        for spec in &self.secondary {
            let r = safety_filter(spec, x, &input)?;
            modified |= r.modified;
            input = r.input;
        }
        Ok(PolicyDecision {
            nominal,
            input,
            primary,
            modified,
        })
    }
}

impl Policy for FilteredPolicy {
    fn input(&self, x: &StateVec) -> Result<InputVec> {
        Ok(self.decide(x)?.input)
    }
}

pub fn filtered_policy(spec: &IccbfSpec, goal: &StateVec, gains: PdGains) -> FilteredPolicy {
    FilteredPolicy::new(spec.clone(), Vec::new(), goal.clone(), gains)
}

/// Everything needed to build the filtered closed loop for any gain vector of
/// the primary barrier: model, barrier, fixed secondary barriers, PD gains.
#[derive(Debug, Clone)]
pub struct SafetyLoop {
    pub model: Arc<dyn DynamicsModel>,
    pub barrier: Arc<dyn CandidateBarrier>,
    pub secondary: Vec<IccbfSpec>,
    pub gains: PdGains,
}

impl SafetyLoop {
    pub fn new(model: Arc<dyn DynamicsModel>, barrier: Arc<dyn CandidateBarrier>, gains: PdGains) -> Self {
        Self {
            model,
            barrier,
            secondary: Vec::new(),
            gains,
        }
    }

    pub fn with_secondary(mut self, barrier: Arc<dyn CandidateBarrier>, params: ClassKParams) -> Self {
        self.secondary
            .push(IccbfSpec::new(Arc::clone(&self.model), barrier, params));
        self
    }

    pub fn spec(&self, params: &ClassKParams) -> IccbfSpec {
        IccbfSpec::new(Arc::clone(&self.model), Arc::clone(&self.barrier), params.clone())
    }

    pub fn policy(&self, params: &ClassKParams, goal: &StateVec) -> FilteredPolicy {
        FilteredPolicy::new(self.spec(params), self.secondary.clone(), goal.clone(), self.gains)
    }
}
