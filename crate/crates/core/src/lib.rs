//! Joint elastic registration and classification of functional data.
//!
//! A convolutional network maps each curve to a monotone warp, the aligned
//! curve is projected onto a Fourier basis and a small MLP classifies the
//! coefficients. Training minimises an SRVF alignment loss plus cross-entropy.

// Validation uses `!(x > 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
mod error;
pub mod fdata;
pub mod interp;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod spectral;
pub mod srvf;
pub mod synthgen;
pub mod trainer;
pub mod warpnet;

pub use error::{CoreError, Result};
pub use fdata::{Dataset, FunctionalSample, Splits, Standardizer, TimeGrid};
pub use losses::LossBreakdown;
pub use metrics::{MetricsReport, Reference};
pub use model::{ForwardOptions, Inference, Model, ModelSpec, Prepared};
pub use trainer::{Checkpoint, TrainConfig, Trainer};
pub use warpnet::WarpFunction;
