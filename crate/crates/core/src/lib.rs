//! ShuffleUNet: a 3D tight-frame UNet with pixel shuffle resampling for
//! diffusion-weighted MRI super-resolution, with the surrounding data,
//! training, evaluation and diffusion tensor tooling.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod dti;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod shuffle;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
