//! Cluster-gated collaborative filtering: rating prediction, user
//! clustering and incentive/penalty thresholding of recommendations.

pub mod clustering;
pub mod dataset;
pub mod error;
pub mod ipu;
pub mod optimizer;
pub mod pipeline;
pub mod predictor;
pub mod similarity;

pub use error::{Error, Result};
