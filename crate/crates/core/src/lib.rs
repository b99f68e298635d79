//! Tri-modal long-horizon forecasting: an EMA-linear time branch, a
//! multi-level wavelet mixer branch and a bidirectional selective
//! state-space branch over period-folded "temporal images", combined by a
//! softmax gate.

pub mod config;
pub mod dataio;
pub mod error;
pub mod freq;
pub mod fusion;
pub mod instnorm;
pub mod model;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod time_branch;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
