//! Discrete-token vision transformer at desk scale: a small f64 autodiff
//! tensor core, a VQ-VAE quantizer, a ViT with a discrete/pixel fusion input
//! layer, two-stage training, a synthetic shape-vs-texture data generator
//! with a corruption suite, and the evaluation harnesses tying them
//! together.

pub mod error;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::Tensor;
