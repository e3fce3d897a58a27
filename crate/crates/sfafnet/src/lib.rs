//! SFAFNet: a spatial-frequency adaptive fusion network for image
//! deblurring, built on an in-crate reverse-mode autodiff tensor core.
//! Everything runs on CPU; f32 is used for training and f64 for the
//! finite-difference gradient checks.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fdgm;
pub mod gfm;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
