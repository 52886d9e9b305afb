//! Debiased contrastive learning with deep embedded clustering.

pub mod autodiff;
pub mod checkpoint;
pub mod clustering;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod lambda;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
