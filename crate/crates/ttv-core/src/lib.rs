//! Deep tensor-to-vector regression models for spectral-mapping speech
//! enhancement: dense (DNN), convolutional (CNN), tensor-train compressed
//! (DNN-TT, CNN-TT) and Tucker-compressed (CNN-Tucker) networks, together
//! with the feature pipeline, trainer, and parameter-count tooling needed
//! to compare them.

pub mod bounds;
pub mod ckpt;
pub mod dsp;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tt;
pub mod tucker;
pub mod zoo;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
