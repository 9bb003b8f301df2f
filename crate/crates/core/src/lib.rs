//! Optimal-transport machinery for converting feature sequences.
//!
//! * [`numerics`]: matrices, seeded RNG, MLPs with manual gradients, Adam.
//! * [`ot`]: cost matrices, log-domain Sinkhorn, exact OT, plan post-processing.
//! * [`conversion`]: Sinkhorn-based frame replacement and a kNN baseline.
//! * [`flow`]: flow matching on pairs sampled from a Sinkhorn plan.
//! * [`neural_ot`]: conditional maximin neural OT, plain and extremal.
//! * [`metrics`]: empirical and Gaussian W2, Fréchet distance, FD ≤ 2·W2² check.
//! * [`io`]: feature/model files, run configs, synthetic tasks, pipelines.

pub mod conversion;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod neural_ot;
pub mod numerics;
pub mod ot;

pub use error::{Error, Result};
