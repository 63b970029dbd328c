//! Minimal differentiable-network toolkit.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layers::{Conv2d, Dense, Embedding, GroupNorm, Layer, LayerSpec, Param};
pub use loss::{cross_entropy_loss, mse_loss, softmax};
pub use network::{Network, Parameterized};
pub use optim::{Algorithm, OptimConfig, OptimState};
pub use tensor::Tensor;
