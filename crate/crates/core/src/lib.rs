//! Unified multi-class anomaly detection with a mixed-attention autoencoder.
//!
//! The pipeline: a frozen backbone produces four feature stages per image,
//! [`ffm`] fuses them into an `N×C` token matrix, [`ang`] injects learned
//! Gaussian noise during training, [`model`] reconstructs the clean tokens,
//! and [`scoring`] turns the residual into anomaly maps and AUROC figures.

pub mod ang;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ffm;
pub mod format;
pub mod gradsuite;
pub mod model;
pub mod optim;
pub mod params;
pub mod resample;
pub mod scoring;
pub mod synthetic;
pub mod trainer;

pub use error::{FormatError, MaaeError, Result};
