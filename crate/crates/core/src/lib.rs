//! Cross-domain single blood-cell image classification.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`dataset`] scans two domain datasets, unifies their labels into 13
//!    classes and assigns stratified folds.
//! 2. [`segmenter`] wraps a promptable-segmentation backbone whose frozen
//!    transformer blocks carry low-rank adapters ([`lora`]). It produces an
//!    image embedding and a cell mask per image, and the mask turns the image
//!    into a gray-filled square crop.
//! 3. [`autoencoder`] compresses embeddings into 50-dim latent features,
//!    trained to reconstruct the crop under an SSIM loss while an MMD term
//!    pulls the two domains' latents together.
//! 4. [`classifiers`] fits random forest, SVM, MLP and gradient-boosted
//!    trees on those features.
//! 5. [`eval`] runs the cross-domain k-fold protocol and renders the report.

pub mod autoencoder;
pub mod classifiers;
pub mod dataset;
pub mod device;
pub mod error;
pub mod eval;
pub mod lora;
pub mod params;
pub mod schedule;
pub mod segmenter;
pub mod synthetic;
pub mod tensor_io;

pub use error::{Error, Result};
