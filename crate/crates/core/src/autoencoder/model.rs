use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig};
use ndarray::Array3;

use super::loss::{LossBreakdown, LossOutput};
use super::{mmd, ssim_per_sample, AeConfig, LatentFeature, ReconstructedImage};
use crate::dataset::{DomainId, UnifiedClass};
use crate::params::ParamStore;
use crate::segmenter::ImageEmbedding;
use crate::tensor_io::TensorArchive;
use crate::{Error, Result};

const CHECKPOINT_STEM: &str = "autoencoder";

#[derive(Debug)]
pub struct CrossDomainAe {
    config: AeConfig,
    seed: u64,
    params: ParamStore,
    encoder: Vec<Conv2d>,
    decoder: Vec<ConvTranspose2d>,
    dtype: DType,
    device: Device,
}

impl CrossDomainAe {
    pub fn new(config: &AeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::trainable(seed);
        let vb = params.var_builder(dtype, device);
        let mut encoder = Vec::with_capacity(config.encoder_channels.len());
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.encoder_channels.iter().enumerate() {
            let cfg = Conv2dConfig {
                stride: 2,
                padding: 1,
                ..Default::default()
            };
            encoder.push(candle_nn::conv2d(c_in, c_out, 3, cfg, vb.pp(format!("encoder.{i}")))?);
            c_in = c_out;
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers());
        let outs = config.decoder_channels.iter().copied().chain(std::iter::once(3));
        for (i, c_out) in outs.enumerate() {
            let cfg = ConvTranspose2dConfig {
                stride: 2,
                padding: 1,
                ..Default::default()
            };
            decoder.push(candle_nn::conv_transpose2d(c_in, c_out, 4, cfg, vb.pp(format!("decoder.{i}")))?);
            c_in = c_out;
        }
        Ok(CrossDomainAe {
            config: config.clone(),
            seed,
            params,
            encoder,
            decoder,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// `(B, C, H, W)` embeddings to `(B, latent)`; any spatial size works.
    pub fn encode(&self, embeddings: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = embeddings.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "embedding has {c} channels, encoder expects {}",
                self.config.in_channels
            )));
        }
        let mut x = embeddings.to_dtype(self.dtype)?;
        for conv in &self.encoder {
            x = conv.forward(&x)?.silu()?;
        }
        Ok(x.mean((2, 3))?)
    }

    /// `(B, latent)` to `(B, 3, S, S)` in `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (b, d) = z.dims2()?;
        if d != self.config.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has {d} values, decoder expects {}",
                self.config.latent_dim()
            )));
        }
        let mut x = z.to_dtype(self.dtype)?.reshape((b, d, 1, 1))?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(&x)?;
            x = if i == last { candle_nn::ops::sigmoid(&x)? } else { x.silu()? };
        }
        Ok(x)
    }

    pub fn embeddings_tensor(&self, embeddings: &[&Array3<f32>]) -> Result<Tensor> {
        stack(embeddings, &self.device)?.to_dtype(self.dtype).map_err(Error::from)
    }

    pub fn encode_embedding(&self, embedding: &ImageEmbedding, label: UnifiedClass) -> Result<LatentFeature> {
        let x = self.embeddings_tensor(&[embedding.features()])?;
        let z = self.encode(&x)?.get(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        LatentFeature::new(embedding.image_id.clone(), embedding.domain, label, z)
    }

    pub fn decode_latent(&self, z: &LatentFeature) -> Result<ReconstructedImage> {
        let t = Tensor::from_slice(z.z(), (1, z.z().len()), &self.device)?;
        let out = self.decode(&t)?.get(0)?.to_dtype(DType::F32)?;
        let (c, h, w) = out.dims3()?;
        let values = out.flatten_all()?.to_vec1::<f32>()?;
        ReconstructedImage::new(Array3::from_shape_vec((c, h, w), values).map_err(|e| Error::Shape(e.to_string()))?)
    }

    /// Composite objective on a batch: mean `1 − SSIM` between decoded and
    /// target images plus `lambda ·` MMD between the two domains' latents.
    /// `targets` must already be at the decoder's output size.
    pub fn total_loss(&self, embeddings: &Tensor, targets: &Tensor, domains: &[DomainId]) -> Result<LossOutput> {
        let b = embeddings.dim(0)?;
        if targets.dim(0)? != b || domains.len() != b {
            return Err(Error::Shape(format!(
                "batch sizes differ: {b} embeddings, {} targets, {} domains",
                targets.dim(0)?,
                domains.len()
            )));
        }
        let side = self.config.output_side();
        if targets.dims()[1..] != [3, side, side] {
            return Err(Error::Shape(format!(
                "targets must be (B, 3, {side}, {side}), got {:?}",
                targets.dims()
            )));
        }
        let z = self.encode(embeddings)?;
        let recon = self.decode(&z)?;
        let targets = targets.to_dtype(self.dtype)?;
        let l_ssim = (ssim_per_sample(&recon, &targets, &self.config.ssim)?.neg()? + 1.0)?.mean_all()?;

        let pick = |d: DomainId| -> Vec<u32> {
            domains
                .iter()
                .enumerate()
                .filter(|(_, x)| **x == d)
                .map(|(i, _)| i as u32)
                .collect()
        };
        let (ia, ib) = (pick(DomainId::Matek19), pick(DomainId::Acevedo20));
        let (l_mmd, skipped) = if ia.is_empty() || ib.is_empty() {
            (Tensor::zeros((), self.dtype, &self.device)?, true)
        } else {
            let za = z.index_select(&Tensor::new(ia.as_slice(), &self.device)?, 0)?;
            let zb = z.index_select(&Tensor::new(ib.as_slice(), &self.device)?, 0)?;
            (mmd(&za, &zb, &self.config.mmd)?, false)
        };
        let total = (&l_ssim + l_mmd.affine(self.config.lambda, 0.0)?)?;
        let breakdown = LossBreakdown::new(
            scalar(&l_ssim)?,
            scalar(&l_mmd)?,
            self.config.lambda,
            skipped,
        );
        Ok(LossOutput {
            total,
            breakdown,
            latents: z,
        })
    }

    /// Writes `autoencoder.json` / `autoencoder.bin`; `extra` lands in the metadata.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "extra": extra,
        });
        self.params.to_archive()?.write(dir, CHECKPOINT_STEM, meta)
    }

    /// Loads a checkpoint; returns the model and the `extra` metadata.
    pub fn load(dir: &Path, device: &Device) -> Result<(Self, serde_json::Value)> {
        let (archive, meta) = TensorArchive::read(dir, CHECKPOINT_STEM)?;
        let config: AeConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::json("autoencoder config", e))?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let model = Self::new(&config, seed, DType::F32, device)?;
        model.params.load_archive(&archive)?;
        Ok((model, meta["extra"].clone()))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stacks equally shaped CHW arrays into `(B, C, H, W)`.
pub(crate) fn stack(items: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let Some(first) = items.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for item in items {
        if item.dim() != (c, h, w) {
            return Err(Error::Shape(format!("batch mixes shapes {:?} and {:?}", (c, h, w), item.dim())));
        }
        data.extend(item.iter().copied());
    }
    Ok(Tensor::from_vec(data, (items.len(), c, h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AeConfig {
        AeConfig {
            in_channels: 8,
            decoder_channels: vec![16, 8, 8],
            ..AeConfig::default()
        }
    }

    #[test]
    fn encoder_output_is_latent_for_any_size() {
        let ae = CrossDomainAe::new(&small(), 0, DType::F32, &Device::Cpu).unwrap();
        for side in [64, 32, 7] {
            let x = Tensor::randn(0f32, 1.0, (2, 8, side, side), &Device::Cpu).unwrap();
            assert_eq!(ae.encode(&x).unwrap().dims(), &[2, 50]);
        }
        let zero = Tensor::zeros((1, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let z = ae.encode(&zero).unwrap().to_vec2::<f32>().unwrap();
        assert!(z[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_channel_count_errors() {
        let ae = CrossDomainAe::new(&small(), 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(ae.encode(&x).is_err());
        let z = Tensor::zeros((1, 49), DType::F32, &Device::Cpu).unwrap();
        assert!(ae.decode(&z).is_err());
    }

    #[test]
    fn decoder_is_bounded() {
        let ae = CrossDomainAe::new(&small(), 1, DType::F32, &Device::Cpu).unwrap();
        let z = Tensor::randn(0f32, 3.0, (3, 50), &Device::Cpu).unwrap();
        let out = ae.decode(&z).unwrap();
        assert_eq!(out.dims(), &[3, 3, 16, 16]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn single_domain_batch_skips_mmd() {
        let ae = CrossDomainAe::new(&small(), 2, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 8, 8, 8), &Device::Cpu).unwrap();
        let t = Tensor::rand(0f32, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let out = ae.total_loss(&x, &t, &[DomainId::Matek19; 2]).unwrap();
        assert!(out.breakdown.mmd_skipped());
        assert_eq!(out.breakdown.l_mmd(), 0.0);
        assert_eq!(out.breakdown.total(), out.breakdown.l_ssim());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ae = CrossDomainAe::new(&small(), 3, DType::F32, &Device::Cpu).unwrap();
        ae.save(dir.path(), serde_json::json!({"epochs": 1})).unwrap();
        let (back, extra) = CrossDomainAe::load(dir.path(), &Device::Cpu).unwrap();
        assert_eq!(back.params().checksum().unwrap(), ae.params().checksum().unwrap());
        assert_eq!(extra["epochs"], 1);
    }
}
