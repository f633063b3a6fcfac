//! Meta-learning with neural kernels: analytic NTK recursions, the meta
//! neural kernel of gradient-based meta-learning, closed-form meta
//! regression with its pseudo-functional-gradient decomposition, finite
//! width MAML training, and synthetic task generators for comparing the
//! two regimes.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `metakernel` binary for scripted experiment runs.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod maml;
pub mod mnk;
pub mod net;
pub mod ntk;
pub mod regression;
pub mod tasks;

pub use error::{Error, Result};
