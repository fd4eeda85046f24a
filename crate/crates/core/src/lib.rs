//! Image-conditioned diffusion transformer for paired image-to-image
//! translation, built on a small reverse-mode autodiff tensor library.

pub mod cli;
pub mod codec;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod semantic;
pub mod tensor;
pub mod sample;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Rng, Tape, Tensor, Var};
