//! Finite-horizon rollout check of locally validated barrier parameters, and
//! labeled-data generation from it.
//!
//! A parameter is accepted over `[t, t + T]` when, along the predicted closed
//! loop under the filtered policy, the candidate input set is non-empty at
//! every visited state and the inner safe set is not left by more than `eps`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{step, StateVec, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::iccbf::IccbfSpec;
use crate::qp_filter::Policy;

pub mod dataset;

pub use dataset::{
    candidate_features, generate_dataset, Dataset, DatasetMeta, DatasetRow, FeatureStats,
    LogUniformParams, ParamSampler, ScenarioSampler, UniformScenario,
};

/// Numerical tolerance for "the state lies in the inner safe set".
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationSettings {
    /// Horizon `T`, seconds.
    pub horizon: f64,
    pub dt: f64,
    /// Allowed excursion of the inner-set margin below zero.
    pub eps: f64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            horizon: 2.0,
            dt: DEFAULT_DT,
            eps: 1e-3,
        }
    }
}

impl ValidationSettings {
    pub fn check(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "validation horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::InvalidParameter(format!(
                "validation dt must satisfy 0 < dt <= horizon, got dt = {}",
                self.dt
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "validation eps must be non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub validated: bool,
    pub horizon: f64,
    pub min_inner_margin: f64,
    pub min_feasibility_margin: f64,
    /// `min_tau h(x(tau))`.
    pub safety_target: f64,
    /// Goal distance at the start minus goal distance at the end.
    pub progress_target: f64,
    /// First time the candidate input set was empty, or the rollout blew up.
    pub infeasible_at: Option<f64>,
    pub steps: usize,
}

/// Roll the closed loop forward from `x0` and check the discrete validity
/// surrogate at every sample, endpoints included.
pub fn validate_horizon(
    spec: &IccbfSpec,
    policy: &dyn Policy,
    x0: &StateVec,
    goal: &StateVec,
    settings: &ValidationSettings,
) -> Result<ValidationReport> {
    settings.check()?;
    let model = spec.model();
    let first = spec.evaluate(x0)?;
    let margin0 = first.stack.inner_margin();
    if margin0 < -MEMBERSHIP_TOL {
        return Err(Error::Precondition(format!(
            "initial state is outside the inner safe set (inner margin {margin0})"
        )));
    }
    if goal.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            what: "goal",
            expected: x0.len(),
            got: goal.len(),
        });
    }

    let steps = settings.steps();
    let bx = model.input_box();
    let start_distance = model.goal_distance(x0, goal);
    let mut min_inner = f64::INFINITY;
    let mut min_feas = f64::INFINITY;
    let mut min_h = f64::INFINITY;
    let mut infeasible_at = None;
    let mut blew_up = false;
    let mut x = x0.clone();
    let mut eval = first;

    for s in 0..=steps {
        let t = s as f64 * settings.dt;
        let feas = eval.constraint.sup(bx);
        min_inner = min_inner.min(eval.stack.inner_margin());
        min_feas = min_feas.min(feas);
        min_h = min_h.min(eval.stack.h());
        if feas < 0.0 && infeasible_at.is_none() {
            infeasible_at = Some(t);
        }
        if s == steps {
            break;
        }
        let next = policy
            .input(&x)
            .and_then(|u| step(model.as_ref(), &x, &u, settings.dt))
            .and_then(|next| spec.evaluate(&next).map(|ev| (next, ev)));
        match next {
            Ok((nx, ev)) => {
                x = nx;
                eval = ev;
            }
            Err(Error::IntegrationBlowup { .. } | Error::NonFinite(_)) => {
                blew_up = true;
                infeasible_at.get_or_insert(t);
                break;
            }
            Err(e) => return Err(e),
        }
    }

    // on blow-up, `x` is the last finite state
    let end_distance = model.goal_distance(&x, goal);
    let validated = !blew_up && min_inner >= -settings.eps && min_feas >= 0.0;
    Ok(ValidationReport {
        validated,
        horizon: settings.horizon,
        min_inner_margin: min_inner,
        min_feasibility_margin: min_feas,
        safety_target: min_h,
        progress_target: start_distance - end_distance,
        infeasible_at,
        steps,
    })
}
