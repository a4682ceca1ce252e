//! Controller auto-calibration by Kalman filtering over closed-loop data.
//!
//! The library tunes parameters of arbitrary parametric feedback controllers
//! by running extended/unscented Kalman-filter recursions against a training
//! objective evaluated on a sliding window of closed-loop operation. A
//! Lyapunov-based safety check can gate every parameter update.
//!
//! Module map:
//! - [`numerics`]: small dense-matrix utilities (Cholesky, Riccati, finite
//!   differences, spectral radius).
//! - [`plants`]: discrete-time simulation models and process-noise recovery.
//! - [`controllers`]: the parametric control laws and parameter layouts.
//! - [`objectives`]: specification functions, targets and the training cost.
//! - [`calibrator`]: window replay and the EKF/UKF parameter recursions.
//! - [`safety`]: closed-loop stability certificates and the update gate.
//! - [`harness`]: experiment orchestration, metrics, CSV export and configs.

pub mod calibrator;
pub mod controllers;
pub mod harness;
pub mod numerics;
pub mod objectives;
pub mod plants;
pub mod safety;
