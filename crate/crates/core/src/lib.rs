//! Nonparametric functional calibration of computer models.
//!
//! The library estimates a control-variable-dependent calibration function
//! θ(·) by RKHS-penalized least squares, selects the penalty by GCV on a
//! linearized smoother, quantifies uncertainty with pointwise confidence
//! bands, and ships a replication harness for the bundled benchmark
//! settings.

pub mod baselines;
pub mod bessel;
pub mod calibrate;
pub mod emulator;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod select;
pub mod uq;

pub use calibrate::{CalibrationEstimate, Coefficients, FitOptions, PhysicalDataset};
pub use emulator::Emulator;
pub use error::{CalibError, Result};
pub use harness::{CodeMode, Method, MetricsTable};
pub use kernel::{Kernel, NullBasis};
pub use model::{BenchmarkSetting, BuiltinModel, ComputerModel, ParamBox};
pub use select::{LambdaSelection, LinearizedSystem};
pub use uq::{BandTarget, ConfidenceBand};
