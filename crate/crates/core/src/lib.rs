//! Unsupervised anomaly detection for assets monitored by several sensor
//! systems.
//!
//! The pipeline forecasts normal behaviour with a small recurrent network,
//! turns each sensor's forecast discrepancy into a p-value under a Gaussian
//! mixture fitted to training errors, and combines the p-values into one
//! asset-level score with a weighted Fisher statistic whose null distribution
//! is calibrated by a moment-matched Gamma fit.
//!
//! The numerical modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which is what the pipeline and the
//! on-disk artifacts use.

pub mod artifact;
pub mod config;
pub mod data;
pub mod discrepancy;
pub mod error;
pub mod eval;
pub mod forecaster;
pub mod gmm;
pub mod interpret;
pub mod pipeline;
pub mod quad;
pub mod scalar;
pub mod score;
pub mod special;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Forecaster = forecaster::Lstm<f64>;
pub type Mixture = gmm::Gmm<f64>;
pub type AssetCalibration = score::Calibration<f64>;
pub type ContributionRanking = interpret::ContributionRanking<f64>;
pub type Predictions = forecaster::Predictions<f64>;
