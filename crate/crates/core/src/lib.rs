//! Vision-aided mmWave beam prediction with a rectified-flow latent model.
//!
//! The crate bundles everything needed to study beam prediction at desk
//! scale: a synthetic V2I scene simulator that emits bounding-box /
//! beam-label sequences over a DFT codebook, a window/split data layer,
//! a small tensor library with reverse-mode AD, the flow-matching
//! predictor with its Euler-solver inference, recurrent baselines, and
//! the evaluation/benchmark harness.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod numerics;
pub mod simulator;

pub use error::{Error, Result};
