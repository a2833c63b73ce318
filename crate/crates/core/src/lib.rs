//! Desk-scale laboratory for image-conditioned GAN augmentation and
//! GAN-based anomaly scoring.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: f64 tensors, reverse-mode differentiation, Adam, `IAGT` files
//! - [`layers`]: convolutions, dense, batch norm, activations, self-attention,
//!   inception-residual blocks
//! - [`models`]: the image-conditioned generator, the noise-only baseline
//!   generator and the discriminator, plus checkpoints
//! - [`training`]: the adversarial training loop
//! - [`augment`]: GAN-based and geometric augmentation with count manifests
//! - [`anogan`]: anomaly scores by latent-space search
//! - [`eval`]: ROC / AUC, the DeLong test and operating points
//! - [`data`]: synthetic lung phantoms, PGM I/O and splits
//! - [`cli`]: the `iagan` command-line driver

pub mod anogan;
pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod layers;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
