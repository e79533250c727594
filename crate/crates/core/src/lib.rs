//! ScarGAN: simulating myocardial scar on scar-free cardiac MR slices with a
//! chain of a mask generator, an intensity heuristic and an image refiner,
//! plus the segmentation experiment and reader-study statistics that evaluate it.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the concrete instantiations.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod heuristic;
pub mod maskgan;
pub mod nets;
pub mod nn;
pub mod refinegan;
pub mod scalar;
pub mod segnet;
pub mod study;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = nets::Network<f32>;
pub type Network64 = nets::Network<f64>;
