//! Candidate barrier functions, the linear class-K parameter family, Lie
//! derivatives, and the relative-degree-one barrier condition.

use std::fmt::{self, Debug};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{eval_actuation, eval_drift, DynamicsModel, InputVec, StateVec};
use crate::error::{Error, Result};
use crate::iccbf::sup_over_box;

/// Relative step of the finite-difference fallback gradient.
pub const FALLBACK_GRADIENT_STEP: f64 = 1e-6;

/// A continuously differentiable `h`, safe set `{x | h(x) >= 0}`.
pub trait CandidateBarrier: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, x: &StateVec) -> f64;

    /// Analytic gradient where available; central differences otherwise.
    fn gradient(&self, x: &StateVec) -> StateVec {
        central_difference(|y| self.value(y), x, FALLBACK_GRADIENT_STEP)
    }
}

/// Central-difference gradient with per-axis step `rel_step * max(1, |x|_inf)`.
///
/// The step actually taken is recovered from the perturbed coordinate so that
/// affine functions are differentiated without representation error.
pub fn central_difference<F>(f: F, x: &StateVec, rel_step: f64) -> StateVec
where
    F: Fn(&StateVec) -> f64,
{
    let scale = x.amax().max(1.0);
    let h = rel_step * scale;
    let mut probe = x.clone();
    let mut grad = StateVec::zeros(x.len());
    for i in 0..x.len() {
        let xi = x[i];
        let hi = xi + h;
        let lo = xi - h;
        probe[i] = hi;
        let fp = f(&probe);
        probe[i] = lo;
        let fm = f(&probe);
        probe[i] = xi;
        grad[i] = (fp - fm) / (hi - lo);
    }
    grad
}

/// `h(x) = limit - x[index]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub index: usize,
    pub limit: f64,
}

impl CandidateBarrier for UpperBound {
    fn name(&self) -> &str {
        "upper_bound"
    }
    fn value(&self, x: &StateVec) -> f64 {
        self.limit - x[self.index]
    }
    fn gradient(&self, x: &StateVec) -> StateVec {
        let mut g = StateVec::zeros(x.len());
        g[self.index] = -1.0;
        g
    }
}

/// `h(x) = x[index] - limit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub index: usize,
    pub limit: f64,
}

impl CandidateBarrier for LowerBound {
    fn name(&self) -> &str {
        "lower_bound"
    }
    fn value(&self, x: &StateVec) -> f64 {
        x[self.index] - self.limit
    }
    fn gradient(&self, x: &StateVec) -> StateVec {
        let mut g = StateVec::zeros(x.len());
        g[self.index] = 1.0;
        g
    }
}

type BarrierFn = dyn Fn(&StateVec) -> f64 + Send + Sync;

/// User-supplied barrier; its gradient comes from the finite-difference fallback.
#[derive(Clone)]
pub struct FnBarrier {
    name: String,
    value: Arc<BarrierFn>,
}

impl FnBarrier {
    pub fn new(name: impl Into<String>, value: impl Fn(&StateVec) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
        }
    }
}

impl Debug for FnBarrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnBarrier").field("name", &self.name).finish()
    }
}

impl CandidateBarrier for FnBarrier {
    fn name(&self) -> &str {
        &self.name
    }
    fn value(&self, x: &StateVec) -> f64 {
        (self.value)(x)
    }
}

/// Gains `k_1..k_r` of the linear class-K family `alpha_i(s) = k_i s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ClassKParams(Vec<f64>);

impl ClassKParams {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidParameter(
                "class-K parameters need at least one coefficient".into(),
            ));
        }
        if let Some((i, k)) = coeffs
            .iter()
            .enumerate()
            .find(|(_, k)| !(k.is_finite() && **k > 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "class-K coefficient k_{} = {k} violates positivity (k_i > 0)",
                i + 1
            )));
        }
        Ok(Self(coeffs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `alpha_{i+1}(s)` for zero-based `i`.
    pub fn alpha(&self, i: usize, s: f64) -> f64 {
        self.0[i] * s
    }

    /// Euclidean distance between log-coefficients.
    pub fn log_distance(&self, other: &ClassKParams) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a.ln() - b.ln()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for ClassKParams {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassKParams> for Vec<f64> {
    fn from(p: ClassKParams) -> Self {
        p.0
    }
}

/// `alpha(s) = k s` with `k > 0`.
pub fn class_k_eval(k: f64, s: f64) -> Result<f64> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "class-K gain must be positive, got {k}"
        )));
    }
    Ok(k * s)
}

/// `(L_f b, L_g b) = (grad b . f, grad b^T g)` at `x`.
pub fn lie_derivatives(
    model: &dyn DynamicsModel,
    b: &dyn CandidateBarrier,
    x: &StateVec,
) -> Result<(f64, DVector<f64>)> {
    let f = eval_drift(model, x)?;
    let g = eval_actuation(model, x)?;
    let grad = b.gradient(x);
    if grad.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "barrier gradient",
            expected: x.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("barrier gradient"));
    }
    Ok((grad.dot(&f), g.transpose() * grad))
}

/// Whether `sup_u [L_f h + L_g h u] >= -k h(x)` at a state inside the safe set.
pub fn cbf_condition_holds(
    model: &dyn DynamicsModel,
    h: &dyn CandidateBarrier,
    k: f64,
    x: &StateVec,
) -> Result<bool> {
    let value = h.value(x);
    if value.is_nan() || value < 0.0 {
        return Err(Error::OutOfSet { value });
    }
    let alpha = class_k_eval(k, value)?;
    let (lf, lg) = lie_derivatives(model, h, x)?;
    Ok(sup_over_box(lf, &lg, model.input_box()) >= -alpha)
}

/// Membership of `u` in the admissible set of the plain barrier constraint.
pub fn kcbf_contains(
    model: &dyn DynamicsModel,
    h: &dyn CandidateBarrier,
    k: f64,
    x: &StateVec,
    u: &InputVec,
) -> Result<bool> {
    model.input_box().check_contains(u)?;
    let alpha = class_k_eval(k, h.value(x))?;
    let (lf, lg) = lie_derivatives(model, h, x)?;
    Ok(lf + lg.dot(u) >= -alpha)
}
