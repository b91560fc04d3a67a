//! Temporal extension of a miniature video-diffusion UNet.
//!
//! The crate builds a small image-to-video UNet, extends the frame capacity
//! of its temporal blocks (cyclic positional tables plus an identity-initialized
//! 3D-convolution adapter), and post-tunes only those blocks on synthetic video.

pub mod checkpoint;
pub mod dataeval;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod surgery;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, ParamMap, VideoModel};
pub use tensor::{DType, Tensor, TensorError};
