//! Desk-scale lesion synthesis by masked diffusion inpainting.
//!
//! Procedural phantoms with exact ground truth, point-prompt mask extraction,
//! a conditional pixel-space diffusion model with classifier-free guidance and
//! masked inpainting, an image-quality metric suite, and classification /
//! detection evaluation harnesses.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod metrics;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod segmenter;
pub mod tensornet;

pub use error::{Error, Result};
pub use image::{BBox, Image, Mask};
pub use scalar::Scalar;

pub type Tensor32 = tensornet::Tensor<f32>;
pub type Tensor64 = tensornet::Tensor<f64>;
pub type Network32 = tensornet::Network<f32>;
pub type Network64 = tensornet::Network<f64>;
