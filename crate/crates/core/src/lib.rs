//! U-Net segmentation with a total-variation regularized loss, on plain
//! `f64` tensors.

pub mod canonical;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
