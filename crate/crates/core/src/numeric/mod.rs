//! Dense-matrix numeric core: storage, primitive forward/backward ops,
//! optimizers, and finite-difference checking.

pub mod scalar;
pub mod matrix;
pub mod params;
pub mod ops;
pub mod optim;
pub mod finite_diff;

pub use matrix::{matmul_into, Matrix};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, StepStats};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
