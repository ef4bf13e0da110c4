//! A desk-scale laboratory for studying weight quantization as a
//! regularizer: learned-step-size fake quantization, Monte-Carlo checks of
//! the quantization-noise regularizer, PAC-Bayes and sharpness flatness
//! measures, loss-landscape slices, corruption robustness and
//! generalization-gap experiments.

pub mod autodiff;
pub mod checkpoint;
pub mod corrupt;
pub mod data;
pub mod desk;
pub mod error;
pub mod eval;
pub mod flatness;
pub mod grid;
pub mod landscape;
pub mod model;
pub mod noise;
pub mod perturb;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
