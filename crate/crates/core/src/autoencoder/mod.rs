//! Cross-domain autoencoder: a small conv encoder maps a backbone embedding
//! to a 50-dim latent, eight transposed convs decode it back to a 256×256
//! image, and training combines an SSIM reconstruction loss with an MMD term
//! between the two domains' latents.

mod features;
mod loss;
pub mod mmd;
mod model;
pub mod ssim;
mod train;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::{DomainId, UnifiedClass};
use crate::{Error, Result};

pub use features::{extract_features, FeatureRow, FeatureTable};
pub use loss::{LossBreakdown, LossOutput};
pub use mmd::{mmd, MmdConfig};
pub use model::CrossDomainAe;
pub use ssim::{ssim, ssim_loss, ssim_per_sample, SsimConfig};
pub use train::{
    train_autoencoder, AeDataset, AeTrainConfig, EpochSummary, MemoryDataset, StepRecord, StoreDataset, TrainHistory,
};

pub const LATENT_DIM: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Channels of the incoming embedding.
    pub in_channels: usize,
    /// Output channels of the encoder convs; the last entry is the latent size.
    pub encoder_channels: Vec<usize>,
    /// Output channels of every transposed conv but the last, which emits RGB.
    pub decoder_channels: Vec<usize>,
    pub ssim: SsimConfig,
    pub mmd: MmdConfig,
    /// Weight of the MMD term.
    pub lambda: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            in_channels: 256,
            encoder_channels: vec![128, 64, LATENT_DIM],
            decoder_channels: vec![256, 128, 64, 64, 32, 32, 16],
            ssim: SsimConfig::default(),
            mmd: MmdConfig::default(),
            lambda: 5.0,
        }
    }
}

impl AeConfig {
    pub fn latent_dim(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder_channels.len() + 1
    }

    /// Each transposed conv doubles the side, starting from 1×1.
    pub fn output_side(&self) -> usize {
        1 << self.decoder_layers()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one non-empty conv".into()));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::InvalidArgument("decoder channel counts must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// Latent vector of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFeature {
    pub image_id: String,
    pub domain: DomainId,
    pub unified_label: UnifiedClass,
    z: Vec<f32>,
}

impl LatentFeature {
    pub fn new(image_id: impl Into<String>, domain: DomainId, unified_label: UnifiedClass, z: Vec<f32>) -> Result<Self> {
        if z.len() != LATENT_DIM {
            return Err(Error::Shape(format!("latent has {} values, expected {LATENT_DIM}", z.len())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent contains non-finite values".into()));
        }
        Ok(LatentFeature {
            image_id: image_id.into(),
            domain,
            unified_label,
            z,
        })
    }

    pub fn z(&self) -> &[f32] {
        &self.z
    }
}

/// Decoder output, `3 × S × S` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedImage {
    pixels: Array3<f32>,
}

impl ReconstructedImage {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != w {
            return Err(Error::Shape(format!("reconstruction must be 3×S×S, got {:?}", pixels.dim())));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument("reconstruction values outside [0, 1]".into()));
        }
        Ok(ReconstructedImage { pixels })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }
}
