//! Spatial-temporal transformer networks for video inpainting, at a scale
//! that trains on a CPU.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ops;
pub mod oracle;
mod par;
pub mod patch;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod verify;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
