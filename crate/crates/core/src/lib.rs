//! Transformer-based cooperative multi-agent Q-learning.
//!
//! Everything is built from scratch on a small dense-matrix core with
//! hand-written reverse-mode gradients: transformer encoders shared by the
//! agent and mixer networks, the Spread particle environment, QMix-style
//! baselines, a CTDE learner with TD(lambda) targets, and the transfer and
//! ablation evaluation used by the CLI.

pub mod error;
pub mod numeric;
pub mod rng;
pub mod transformer;
pub mod spread;
pub mod agent;
pub mod mixer;
pub mod baseline;
pub mod model;
pub mod episode;
pub mod learner;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod metrics;
pub mod runtime;

pub use error::{Error, Result};
pub use numeric::scalar::Scalar;
