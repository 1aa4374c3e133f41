//! Small-signal stability certificates for droop-controlled inverter grids.
//!
//! The pipeline runs
//! grid model → equilibrium → block Jacobian → timescale reduction →
//! Lyapunov certificates → gain conditions, and cross-checks the verdict
//! against the spectrum of the full Jacobian and time-domain simulation.
//!
//! Every numerical routine is generic over [`Scalar`] (`f32`, `f64`);
//! the aliases below fix `f64`, which is what the CLI and reports use.

pub mod certificates;
pub mod conditions;
pub mod equilibrium;
pub mod error;
pub mod export;
pub mod grid;
pub mod ieee13;
pub mod linalg;
pub mod linearize;
pub mod scalar;
pub mod simulator;
pub mod synthetic;
pub mod timescale;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type GridSpec = grid::GridSpec<f64>;
pub type OperatingPoint = grid::OperatingPoint<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type Vector = linalg::Vector<f64>;
pub type StabilityReport = conditions::StabilityReport<f64>;
pub type Analysis = conditions::Analysis<f64>;
pub type AnalyzeOptions = conditions::AnalyzeOptions<f64>;
pub type CertificateSet = certificates::CertificateSet<f64>;
pub type Trajectory = simulator::Trajectory<f64>;
pub type StepControl = simulator::StepControl<f64>;
