//! Latent diffusion adversarial patches at desk scale.
//!
//! The crate trains a small perceptual-compression autoencoder and a latent
//! DDPM on procedurally generated natural-like images, trains a toy grid
//! detector on synthetic scenes, and optimizes the mean and scale of the
//! diffusion seed noise so that the decoded patch suppresses the detector's
//! person-class confidence. All computation is `f64` on the CPU through the
//! reverse-mode tape in [`autograd`].

pub mod artifact;
pub mod autoencoder;
pub mod autograd;
pub mod corpus;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod patch;
pub mod rng;
pub mod tensor;

pub use error::{LdpError, Result};
pub use geometry::{BBox, Detection, ScoredBox};
pub use image::{ImageTensor, LatentShape, LatentTensor};
pub use rng::RandomSource;
pub use tensor::Tensor;
