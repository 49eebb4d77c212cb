//! Input-constrained barrier recursion.
//!
//! Starting from `b_0 = h`, each level folds the worst-case input into the
//! derivative of the previous one:
//!
//! ```text
//! b_i(x)    = inf_{u in U} [ grad b_{i-1}(x) . (f(x) + g(x) u) ] + k_i b_{i-1}(x)
//! b_r(x, u) =               grad b_{r-1}(x) . (f(x) + g(x) u)   + k_r b_{r-1}(x)
//! ```
//!
//! `b_r` is affine in `u`, so it is carried around as an [`AffineConstraint`].
//! The inner safe set is the intersection of the superlevel sets of
//! `b_0..b_{r-1}`; the candidate input set is `{u in U | b_r(x, u) >= 0}`.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::barrier::{central_difference, CandidateBarrier, ClassKParams};
use crate::dynamics::{DynamicsModel, InputBox, InputVec, StateVec};
use crate::error::{Error, Result};

/// Relative step for the finite-difference gradients of `b_i`, `i >= 1`.
pub const LEVEL_GRADIENT_STEP: f64 = 1e-5;

/// `L_f + inf_{u in box} L_g . u`.
pub fn inf_over_box(lf: f64, lg: &DVector<f64>, bx: &InputBox) -> f64 {
    lf + lg
        .iter()
        .zip(bx.lower().iter().zip(bx.upper()))
        .map(|(g, (lo, hi))| (g * lo).min(g * hi))
        .sum::<f64>()
}

/// `L_f + sup_{u in box} L_g . u`.
pub fn sup_over_box(lf: f64, lg: &DVector<f64>, bx: &InputBox) -> f64 {
    lf + lg
        .iter()
        .zip(bx.lower().iter().zip(bx.upper()))
        .map(|(g, (lo, hi))| (g * lo).max(g * hi))
        .sum::<f64>()
}

/// A candidate input-constrained barrier: base function, model, and one gain
/// per recursion level. The degree `r` is the number of gains.
#[derive(Debug, Clone)]
pub struct IccbfSpec {
    model: Arc<dyn DynamicsModel>,
    base: Arc<dyn CandidateBarrier>,
    params: ClassKParams,
}

impl IccbfSpec {
    pub fn new(
        model: Arc<dyn DynamicsModel>,
        base: Arc<dyn CandidateBarrier>,
        params: ClassKParams,
    ) -> Self {
        Self {
            model,
            base,
            params,
        }
    }

    pub fn degree(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ClassKParams {
        &self.params
    }

    pub fn model(&self) -> &Arc<dyn DynamicsModel> {
        &self.model
    }

    pub fn base(&self) -> &Arc<dyn CandidateBarrier> {
        &self.base
    }

    /// Same barrier and model, different gains (degree may change).
    pub fn with_params(&self, params: ClassKParams) -> Self {
        Self {
            model: Arc::clone(&self.model),
            base: Arc::clone(&self.base),
            params,
        }
    }

    fn check_state(&self, x: &StateVec) -> Result<()> {
        let n = self.model.state_dim();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: n,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        Ok(())
    }

    /// `b_level(x)` without dimension checks.
    fn level(&self, level: usize, x: &StateVec) -> f64 {
        if level == 0 {
            return self.base.value(x);
        }
        let prev = self.level(level - 1, x);
        let grad = self.level_gradient(level - 1, x);
        let (lf, lg) = self.lie(&grad, x);
        inf_over_box(lf, &lg, self.model.input_box()) + self.params.alpha(level - 1, prev)
    }

    fn level_gradient(&self, level: usize, x: &StateVec) -> StateVec {
        if level == 0 {
            self.base.gradient(x)
        } else {
            central_difference(|y| self.level(level, y), x, LEVEL_GRADIENT_STEP)
        }
    }

    fn lie(&self, grad: &StateVec, x: &StateVec) -> (f64, DVector<f64>) {
        let f = self.model.drift(x);
        let g = self.model.actuation(x);
        (grad.dot(&f), g.transpose() * grad)
    }

    /// Stack and constraint in one pass.
    pub fn evaluate(&self, x: &StateVec) -> Result<IccbfEval> {
        self.check_state(x)?;
        let r = self.degree();
        let mut values = Vec::with_capacity(r);
        values.push(self.base.value(x));
        let mut grad = self.base.gradient(x);
        if grad.len() != x.len() {
            return Err(Error::DimensionMismatch {
                what: "barrier gradient",
                expected: x.len(),
                got: grad.len(),
            });
        }
        for level in 1..=r {
            let (lf, lg) = self.lie(&grad, x);
            let prev = values[level - 1];
            if level == r {
                let constraint = AffineConstraint {
                    offset: lf + self.params.alpha(r - 1, prev),
                    slope: lg,
                };
                let stack = BarrierStack { values };
                if !stack.values.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("barrier stack"));
                }
                if !constraint.is_finite() {
                    return Err(Error::NonFinite("barrier constraint"));
                }
                return Ok(IccbfEval { stack, constraint });
            }
            values.push(inf_over_box(lf, &lg, self.model.input_box()) + self.params.alpha(level - 1, prev));
            grad = self.level_gradient(level, x);
        }
        unreachable!("degree is at least one")
    }
}

/// `b_0(x) .. b_{r-1}(x)` at one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierStack {
    pub values: Vec<f64>,
}

impl BarrierStack {
    /// `min_i b_i(x)`; non-negative iff `x` lies in the inner safe set.
    pub fn inner_margin(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn h(&self) -> f64 {
        self.values[0]
    }
}

/// `b_r(x, u) = offset + slope . u` at a fixed state.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub offset: f64,
    pub slope: DVector<f64>,
}

impl AffineConstraint {
    pub fn value(&self, u: &InputVec) -> f64 {
        self.offset + self.slope.dot(u)
    }

    pub fn sup(&self, bx: &InputBox) -> f64 {
        sup_over_box(self.offset, &self.slope, bx)
    }

    /// A box point attaining [`Self::sup`]; coordinates with zero slope take
    /// the corresponding entry of `fallback` clamped into the box.
    pub fn maximizer(&self, bx: &InputBox, fallback: &InputVec) -> InputVec {
        InputVec::from_iterator(
            self.slope.len(),
            (0..self.slope.len()).map(|j| {
                let s = self.slope[j];
                if s > 0.0 {
                    bx.upper()[j]
                } else if s < 0.0 {
                    bx.lower()[j]
                } else {
                    fallback[j].clamp(bx.lower()[j], bx.upper()[j])
                }
            }),
        )
    }

    fn is_finite(&self) -> bool {
        self.offset.is_finite() && self.slope.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct IccbfEval {
    pub stack: BarrierStack,
    pub constraint: AffineConstraint,
}

/// Outcome of the candidate-input-set emptiness check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// `sup_{u in U} b_r(x, u)`.
    pub margin: f64,
}

pub fn eval_stack(spec: &IccbfSpec, x: &StateVec) -> Result<BarrierStack> {
    Ok(spec.evaluate(x)?.stack)
}

/// The affine-in-`u` coefficients of `b_r` at `x`, exact by control-affinity.
pub fn constraint_coefficients(spec: &IccbfSpec, x: &StateVec) -> Result<AffineConstraint> {
    Ok(spec.evaluate(x)?.constraint)
}

/// `b_r(x, u)` for an admissible `u`.
pub fn eval_constraint(spec: &IccbfSpec, x: &StateVec, u: &InputVec) -> Result<f64> {
    spec.model().input_box().check_contains(u)?;
    Ok(constraint_coefficients(spec, x)?.value(u))
}

pub fn inner_set_margin(spec: &IccbfSpec, x: &StateVec) -> Result<f64> {
    Ok(eval_stack(spec, x)?.inner_margin())
}

pub fn kcand_feasible(spec: &IccbfSpec, x: &StateVec) -> Result<Feasibility> {
    let c = constraint_coefficients(spec, x)?;
    let margin = c.sup(spec.model().input_box());
    Ok(Feasibility {
        feasible: margin >= 0.0,
        margin,
    })
}
