//! Semantically guided image-to-image translation for unsupervised domain
//! adaptation of semantic segmentation, trained end-to-end on a procedural
//! two-domain toy benchmark.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense tensors with reverse-mode automatic differentiation
//! * [`nn`] — convolutions, normalizations, semantic denormalization,
//!   spectral normalization, residual blocks
//! * [`models`] — encoders, generators, patch discriminators, the
//!   segmentation network and the output-space discriminator
//! * [`losses`] — reconstruction, least-squares GAN, cycle, symmetric
//!   cross-entropy, segmentation and output-space adversarial objectives
//! * [`optim`] / [`train`] — Adam with poly decay, the two training stages
//!   and the bidirectional learning loop
//! * [`data`] — the procedural two-domain dataset and its file formats
//! * [`metrics`] — confusion matrix / mIoU, inception score, Fréchet distance
//! * [`config`], [`checkpoint`], [`commands`] — the user surface

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

use std::fmt;

/// Scalar type the numeric core is generic over.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` literal to the active scalar type.
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("scalar conversion")
}

/// Tensor over the default 32-bit training scalar.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor over a 64-bit scalar, used where extra precision matters.
pub type Tensor64 = tensor::Tensor<f64>;

pub use error::Error;
pub use tensor::Tensor;
