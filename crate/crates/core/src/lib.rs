//! Input-constrained control barrier functions with finite-horizon parameter
//! validation and online, uncertainty-aware parameter adaptation.
//!
//! The crate is organized bottom-up:
//!
//! - [`dynamics`]: control-affine models and RK4 integration
//! - [`barrier`]: candidate barriers, linear class-K gains, Lie derivatives
//! - [`iccbf`]: the input-constrained barrier recursion and candidate input sets
//! - [`qp_filter`]: the minimum-deviation safety filter and filtered policies
//! - [`validator`]: finite-horizon validation of gain vectors, dataset generation
//! - [`penn`]: probabilistic ensemble regressor over validation labels
//! - [`adaptation`]: the propose / gate / select / confirm loop
//! - [`harness`]: scenario configuration and the command-line stages

pub mod adaptation;
pub mod barrier;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod iccbf;
pub mod penn;
pub mod qp_filter;
pub mod validator;

pub use barrier::{CandidateBarrier, ClassKParams, FnBarrier, LowerBound, UpperBound};
pub use dynamics::{
    DoubleIntegrator, DynamicsModel, InputBox, InputVec, LinearSystem, Quadplane, QuadplaneParams,
    StateVec, Unicycle,
};
pub use error::{Error, Result};
pub use iccbf::{BarrierStack, Feasibility, IccbfSpec};
pub use penn::{EnsembleModel, EnsemblePrediction, TrainConfig};
pub use qp_filter::{FilterResult, FilteredPolicy, PdGains, Policy, SafetyLoop};
pub use validator::{ValidationReport, ValidationSettings};
