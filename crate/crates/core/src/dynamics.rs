//! Control-affine models `xdot = f(x) + g(x) u` with box-constrained inputs,
//! and a fixed-step RK4 integrator.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp_filter::PdGains;

pub type StateVec = DVector<f64>;
pub type InputVec = DVector<f64>;

/// Default integration step in seconds.
pub const DEFAULT_DT: f64 = 0.01;

/// Compact admissible input set `U = [lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "input box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "input box bound {j} is not finite"
                )));
            }
            if lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "input box bound {j}: lower {lo} > upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-limit, limit]^m`.
    pub fn symmetric(limits: &[f64]) -> Result<Self> {
        Self::new(limits.iter().map(|l| -l).collect(), limits.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, u: &InputVec) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub(crate) fn check_contains(&self, u: &InputVec) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.dim(),
                got: u.len(),
            });
        }
        if !self.contains(u) {
            return Err(Error::InvalidInput(format!(
                "input {:?} lies outside the admissible box",
                u.as_slice()
            )));
        }
        Ok(())
    }
}

/// A control-affine system. Implementations must be deterministic and
/// immutable after construction.
pub trait DynamicsModel: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input_box(&self) -> &InputBox;

    /// `f(x)`; callers go through [`eval_drift`] for dimension checks.
    fn drift(&self, x: &StateVec) -> StateVec;

    /// `g(x)`, an `n x m` matrix.
    fn actuation(&self, x: &StateVec) -> DMatrix<f64>;

    /// Unclamped proportional-derivative tracking input toward `goal`.
    fn tracking_input(&self, goal: &StateVec, x: &StateVec, gains: &PdGains) -> InputVec;

    /// Task-space distance to the goal used for progress metrics.
    fn goal_distance(&self, x: &StateVec, goal: &StateVec) -> f64 {
        (x - goal).norm()
    }
}

fn check_state(model: &dyn DynamicsModel, x: &StateVec) -> Result<()> {
    if x.len() != model.state_dim() {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: model.state_dim(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    Ok(())
}

pub fn eval_drift(model: &dyn DynamicsModel, x: &StateVec) -> Result<StateVec> {
    check_state(model, x)?;
    Ok(model.drift(x))
}

pub fn eval_actuation(model: &dyn DynamicsModel, x: &StateVec) -> Result<DMatrix<f64>> {
    check_state(model, x)?;
    Ok(model.actuation(x))
}

fn vector_field(model: &dyn DynamicsModel, x: &StateVec, u: &InputVec) -> StateVec {
    model.drift(x) + model.actuation(x) * u
}

/// One classical RK4 step with `u` held constant over `dt`.
pub fn step(model: &dyn DynamicsModel, x: &StateVec, u: &InputVec, dt: f64) -> Result<StateVec> {
    check_state(model, x)?;
    if u.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "input",
            expected: model.input_dim(),
            got: u.len(),
        });
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let k1 = vector_field(model, x, u);
    let k2 = vector_field(model, &(x + &k1 * (0.5 * dt)), u);
    let k3 = vector_field(model, &(x + &k2 * (0.5 * dt)), u);
    let k4 = vector_field(model, &(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::IntegrationBlowup { t: dt });
    }
    Ok(next)
}

/// Componentwise projection of `u` onto the box.
pub fn clamp_input(bx: &InputBox, u: &InputVec) -> InputVec {
    InputVec::from_iterator(
        u.len(),
        u.iter()
            .zip(bx.lower().iter().zip(bx.upper()))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
    )
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    r - std::f64::consts::PI
}

/// `pdot = v`, `vdot = u`. State `(p, v)`, one input.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    input_box: InputBox,
}

impl DoubleIntegrator {
    pub fn new(input_box: InputBox) -> Result<Self> {
        if input_box.dim() != 1 {
            return Err(Error::DimensionMismatch {
                what: "double integrator input box",
                expected: 1,
                got: input_box.dim(),
            });
        }
        Ok(Self { input_box })
    }
}

impl Default for DoubleIntegrator {
    /// Unit acceleration limit `|u| <= 1`.
    fn default() -> Self {
        Self {
            input_box: InputBox {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
        }
    }
}

impl DynamicsModel for DoubleIntegrator {
    fn name(&self) -> &str {
        "double_integrator"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn input_box(&self) -> &InputBox {
        &self.input_box
    }
    fn drift(&self, x: &StateVec) -> StateVec {
        StateVec::from_vec(vec![x[1], 0.0])
    }
    fn actuation(&self, _x: &StateVec) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }
    fn tracking_input(&self, goal: &StateVec, x: &StateVec, gains: &PdGains) -> InputVec {
        InputVec::from_element(1, gains.kp * (goal[0] - x[0]) + gains.kd * (goal[1] - x[1]))
    }
    fn goal_distance(&self, x: &StateVec, goal: &StateVec) -> f64 {
        (x[0] - goal[0]).abs()
    }
}

/// Kinematic unicycle: state `(px, py, heading)`, inputs `(speed, turn rate)`.
#[derive(Debug, Clone)]
pub struct Unicycle {
    input_box: InputBox,
}

impl Unicycle {
    pub fn new(input_box: InputBox) -> Result<Self> {
        if input_box.dim() != 2 {
            return Err(Error::DimensionMismatch {
                what: "unicycle input box",
                expected: 2,
                got: input_box.dim(),
            });
        }
        Ok(Self { input_box })
    }
}

impl Default for Unicycle {
    fn default() -> Self {
        Self {
            input_box: InputBox {
                lower: vec![-1.0, -2.0],
                upper: vec![1.0, 2.0],
            },
        }
    }
}

impl DynamicsModel for Unicycle {
    fn name(&self) -> &str {
        "unicycle"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn input_box(&self) -> &InputBox {
        &self.input_box
    }
    fn drift(&self, _x: &StateVec) -> StateVec {
        StateVec::zeros(3)
    }
    fn actuation(&self, x: &StateVec) -> DMatrix<f64> {
        let (s, c) = x[2].sin_cos();
        DMatrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0])
    }
    /// Speed from the along-heading position error (`kp`), turn rate from the
    /// bearing error (`kd`).
    fn tracking_input(&self, goal: &StateVec, x: &StateVec, gains: &PdGains) -> InputVec {
        let dx = goal[0] - x[0];
        let dy = goal[1] - x[1];
        let (s, c) = x[2].sin_cos();
        let speed = gains.kp * (dx * c + dy * s);
        let bearing = if dx.hypot(dy) > 1e-9 {
            wrap_angle(dy.atan2(dx) - x[2])
        } else {
            wrap_angle(goal[2] - x[2])
        };
        InputVec::from_vec(vec![speed, gains.kd * bearing])
    }
    fn goal_distance(&self, x: &StateVec, goal: &StateVec) -> f64 {
        (x[0] - goal[0]).hypot(x[1] - goal[1])
    }
}

/// Physical constants of the planar quadplane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadplaneParams {
    /// kg
    pub mass: f64,
    /// kg m^2
    pub inertia: f64,
    /// m/s^2
    pub gravity: f64,
    /// Mass-normalized quadratic drag coefficient, 1/m.
    pub drag: f64,
    /// Lift acceleration per unit forward speed, 1/s.
    pub lift_slope: f64,
    /// N
    pub max_vertical_thrust: f64,
    /// N
    pub max_forward_thrust: f64,
    /// N m
    pub max_pitch_moment: f64,
}

impl Default for QuadplaneParams {
    fn default() -> Self {
        Self {
            mass: 2.0,
            inertia: 0.2,
            gravity: 9.81,
            drag: 0.02,
            lift_slope: 0.3,
            max_vertical_thrust: 40.0,
            max_forward_thrust: 12.0,
            max_pitch_moment: 1.0,
        }
    }
}

/// Longitudinal quadplane surrogate.
///
/// State `(x, z, vx, vz, pitch, pitch_rate)`; inputs `(vertical rotor thrust,
/// forward thrust, pitch moment)`. Thrust directions are body-independent, so
/// `g` is constant and mass-normalized:
///
/// ```text
/// vx' = -drag vx|vx| + T_f / m
/// vz' = -gravity + lift_slope vx - drag vz|vz| + T_v / m
/// pitch_rate' = M / I
/// ```
#[derive(Debug, Clone)]
pub struct Quadplane {
    params: QuadplaneParams,
    input_box: InputBox,
}

impl Quadplane {
    pub fn new(params: QuadplaneParams) -> Result<Self> {
        let positive = [
            ("mass", params.mass),
            ("inertia", params.inertia),
            ("gravity", params.gravity),
            ("max_vertical_thrust", params.max_vertical_thrust),
            ("max_forward_thrust", params.max_forward_thrust),
            ("max_pitch_moment", params.max_pitch_moment),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("quadplane {name} must be positive")));
            }
        }
        if !(params.drag >= 0.0 && params.lift_slope.is_finite()) {
            return Err(Error::InvalidParameter(
                "quadplane drag must be non-negative and lift slope finite".into(),
            ));
        }
        let input_box = InputBox::new(
            vec![0.0, 0.0, -params.max_pitch_moment],
            vec![
                params.max_vertical_thrust,
                params.max_forward_thrust,
                params.max_pitch_moment,
            ],
        )?;
        Ok(Self { params, input_box })
    }

    pub fn params(&self) -> &QuadplaneParams {
        &self.params
    }

    /// Vertical thrust that cancels gravity in hover.
    pub fn hover_thrust(&self) -> f64 {
        self.params.mass * self.params.gravity
    }
}

impl Default for Quadplane {
    fn default() -> Self {
        Self::new(QuadplaneParams::default()).expect("default quadplane parameters are valid")
    }
}

impl DynamicsModel for Quadplane {
    fn name(&self) -> &str {
        "quadplane"
    }
    fn state_dim(&self) -> usize {
        6
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn input_box(&self) -> &InputBox {
        &self.input_box
    }
    fn drift(&self, x: &StateVec) -> StateVec {
        let p = &self.params;
        let (vx, vz, rate) = (x[2], x[3], x[5]);
        StateVec::from_vec(vec![
            vx,
            vz,
            -p.drag * vx * vx.abs(),
            -p.gravity + p.lift_slope * vx - p.drag * vz * vz.abs(),
            rate,
            0.0,
        ])
    }
    fn actuation(&self, _x: &StateVec) -> DMatrix<f64> {
        let p = &self.params;
        let mut g = DMatrix::zeros(6, 3);
        g[(3, 0)] = 1.0 / p.mass;
        g[(2, 1)] = 1.0 / p.mass;
        g[(5, 2)] = 1.0 / p.inertia;
        g
    }
    /// Feedback-linearizing PD per axis: gravity, lift and drag are cancelled
    /// so the hover trim at the goal is exactly `m * gravity`.
    fn tracking_input(&self, goal: &StateVec, x: &StateVec, gains: &PdGains) -> InputVec {
        let p = &self.params;
        let ax = gains.kp * (goal[0] - x[0]) + gains.kd * (goal[2] - x[2]);
        let az = gains.kp * (goal[1] - x[1]) + gains.kd * (goal[3] - x[3]);
        let alpha = gains.kp * (goal[4] - x[4]) + gains.kd * (goal[5] - x[5]);
        let (vx, vz) = (x[2], x[3]);
        InputVec::from_vec(vec![
            p.mass * (p.gravity - p.lift_slope * vx + p.drag * vz * vz.abs() + az),
            p.mass * (p.drag * vx * vx.abs() + ax),
            p.inertia * alpha,
        ])
    }
    fn goal_distance(&self, x: &StateVec, goal: &StateVec) -> f64 {
        (x[0] - goal[0]).hypot(x[1] - goal[1])
    }
}

/// Linear time-invariant system `xdot = A x + B u`. Also covers driftless and
/// input-free (`m = 0`) edge cases.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    input_box: InputBox,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, input_box: InputBox) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidParameter("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch {
                what: "B rows",
                expected: a.nrows(),
                got: b.nrows(),
            });
        }
        if b.ncols() != input_box.dim() {
            return Err(Error::DimensionMismatch {
                what: "input box",
                expected: b.ncols(),
                got: input_box.dim(),
            });
        }
        Ok(Self { a, b, input_box })
    }
}

impl DynamicsModel for LinearSystem {
    fn name(&self) -> &str {
        "linear"
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn input_box(&self) -> &InputBox {
        &self.input_box
    }
    fn drift(&self, x: &StateVec) -> StateVec {
        &self.a * x
    }
    fn actuation(&self, _x: &StateVec) -> DMatrix<f64> {
        self.b.clone()
    }
    /// `B^T kp (goal - x)`.
    fn tracking_input(&self, goal: &StateVec, x: &StateVec, gains: &PdGains) -> InputVec {
        self.b.transpose() * ((goal - x) * gains.kp)
    }
}
