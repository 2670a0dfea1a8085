//! Minimal dense/strided-convolution engine with reverse-mode gradients.
//!
//! Layers process a leading batch axis. `forward` caches what `backward`
//! needs; `infer` is the cache-free path used for prediction.

mod layer;
mod network;
mod optim;
mod tensor;

pub use layer::{smooth_leaky, smooth_leaky_grad, Layer, LayerKind, LayerSpec, LEAKY_SLOPE};
pub use network::Network;
pub use optim::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
pub use tensor::{Real, Tensor};
