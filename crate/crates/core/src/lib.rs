//! LoRA and AdaLoRA adapters on a miniature Q-Former, with a small
//! reverse-mode autodiff engine, rank allocation, training and reporting.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod adapters;
pub mod allocator;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod params;
pub mod qformer;
pub mod report;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type QFormer64 = qformer::QFormer<f64>;
pub type QFormer32 = qformer::QFormer<f32>;
pub type AdapterSet64 = adapters::AdapterSet<f64>;
pub type AdapterSet32 = adapters::AdapterSet<f32>;
pub type ModelInputs64 = qformer::ModelInputs<f64>;
pub type ModelInputs32 = qformer::ModelInputs<f32>;
