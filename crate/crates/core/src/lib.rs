//! Latent-space texture mosaics: a fully convolutional texture generator,
//! a content + texture objective over its latent field, a box-constrained
//! quasi-Newton optimizer and a tiled renderer for large outputs.

pub mod error;
pub mod generator;
pub mod image_io;
pub mod kernels;
pub mod losses;
pub mod optimizer;
pub mod tape;
pub mod tensor;
pub mod tiler;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorSpec, LatentState};
pub use tensor::{Scalar, Shape4, Tensor4};
