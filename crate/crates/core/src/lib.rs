//! Vision Transformer image classification built on a small reverse-mode
//! autodiff engine.

pub mod data;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;
