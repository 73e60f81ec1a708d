//! Gradient-boosted decision trees trained on low-bit quantized gradients.
//!
//! Gradients and hessians are stochastically rounded to a few bits per
//! sample, histograms accumulate packed integers, and split gains are
//! evaluated on the integer sums scaled back to real units.

pub mod bench;
pub mod booster;
pub mod dataset;
pub mod distsim;
pub mod error;
pub mod histogram;
mod json;
pub mod loss;
pub mod quantize;
pub mod synthetic;
pub mod theory;
pub mod tree;

pub use booster::{train, train_raw, Model, TrainConfig};
pub use dataset::{bin_dataset, BinnedDataset, RawDataset};
pub use error::{Error, Result};
pub use loss::{Metric, Objective};
pub use quantize::Rounding;
