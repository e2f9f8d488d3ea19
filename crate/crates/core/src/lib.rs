//! Edge-side data screening for keyword-searchable encrypted IIoT storage.
//!
//! Records are screened by an isolation forest and valued with exact
//! KNN-Shapley values before they reach the edge lookup table and the
//! cloud ciphertext store. A gradient-boosted regressor is trained on the
//! retained data, and [`pipeline`] ties the stages together and runs the
//! storage, accuracy and search-time benchmark.

pub mod anomaly;
mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod matrix;
pub mod pipeline;
pub mod regressor;
pub mod sse;
pub mod valuation;

pub use crate::dataset::{Dataset, KeywordBin, Scaler, SensorRecord};
pub use crate::error::{Error, Result};
pub use crate::matrix::FeatureMatrix;
