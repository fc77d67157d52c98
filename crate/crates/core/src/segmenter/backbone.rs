use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor, Var};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::sam::{adapter_target_id, AdapterVars, ImageEncoder, MaskDecoder, PointPrompt, Projection, PromptEncoder, SamConfig};
use super::{Embedder, ImageEmbedding, SegmentationMask};
use crate::dataset::{resize_chw, resize_plane, CellImage, IMAGE_SIDE};
use crate::lora::{LoraAdapter, DEFAULT_RANK};
use crate::params::ParamStore;
use crate::{Error, Result};

const PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
const PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    VitB,
    VitL,
    VitH,
    Tiny,
}

impl BackboneVariant {
    pub fn config(self) -> SamConfig {
        match self {
            BackboneVariant::VitB => SamConfig::vit_b(),
            BackboneVariant::VitL => SamConfig::vit_l(),
            BackboneVariant::VitH => SamConfig::vit_h(),
            BackboneVariant::Tiny => SamConfig::tiny(),
        }
    }
}

impl std::str::FromStr for BackboneVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::InvalidArgument(format!("unknown backbone variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: DEFAULT_RANK,
            targets: vec![Projection::Q, Projection::V],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One foreground point at the image center.
    CenterPoint,
    NoPrompt,
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    /// A safetensors file with the full model.
    File(PathBuf),
    /// Seeded random initialization; only accepted for the tiny variant.
    Random,
}

/// Frozen backbone plus low-rank adapters on its attention projections and
/// trainable prompt encoder / mask decoder.
#[derive(Debug)]
pub struct AdaptedBackbone {
    variant: BackboneVariant,
    config: SamConfig,
    lora: LoraConfig,
    prompt: PromptMode,
    weights: Weights,
    frozen: ParamStore,
    heads: ParamStore,
    adapters: Vec<AdapterVars>,
    encoder: ImageEncoder,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    device: Device,
}

fn load_weight_file(path: &Path, device: &Device) -> Result<Arc<HashMap<String, Tensor>>> {
    if !path.exists() {
        return Err(Error::MissingWeights(format!("{} does not exist", path.display())));
    }
    let tensors = candle_core::safetensors::load(path, device)
        .map_err(|e| Error::MissingWeights(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(tensors))
}

impl AdaptedBackbone {
    pub fn attach_adapters(
        variant: BackboneVariant,
        lora: &LoraConfig,
        weights: &Weights,
        prompt: PromptMode,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        if lora.targets.is_empty() {
            return Err(Error::InvalidArgument("adapter target list is empty".into()));
        }
        let mut targets = lora.targets.clone();
        targets.sort();
        targets.dedup();
        if targets.len() != lora.targets.len() {
            return Err(Error::InvalidArgument(format!("duplicate adapter targets {:?}", lora.targets)));
        }
        let config = variant.config();
        let (frozen, heads) = match weights {
            Weights::Random if variant != BackboneVariant::Tiny => {
                return Err(Error::MissingWeights(format!(
                    "variant {variant:?} needs a pretrained weight file"
                )))
            }
            Weights::Random => (ParamStore::frozen(seed), ParamStore::trainable(seed.wrapping_add(1))),
            Weights::File(path) => {
                let map = load_weight_file(path, device)?;
                (
                    ParamStore::frozen(seed).with_pretrained(map.clone(), true),
                    ParamStore::trainable(seed.wrapping_add(1)).with_pretrained(map, true),
                )
            }
        };

        let dim = config.encoder_embed_dim;
        let mut adapters = Vec::new();
        let mut per_block: BTreeMap<usize, Vec<(Projection, AdapterVars)>> = BTreeMap::new();
        for block in 0..config.encoder_depth {
            for &projection in &targets {
                let target_id = adapter_target_id(block, projection);
                let adapter_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(adapters.len() as u64);
                let init = LoraAdapter::init(&target_id, dim, dim, lora.rank, adapter_seed)?;
                let vars = adapter_to_vars(&init, device)?;
                per_block.entry(block).or_default().push((projection, vars.clone()));
                adapters.push(vars);
            }
        }

        let map_missing = |e: candle_core::Error| match weights {
            Weights::File(path) => Error::MissingWeights(format!("{}: {e}", path.display())),
            Weights::Random => Error::Tensor(e),
        };
        let fvb = frozen.var_builder(DType::F32, device);
        let hvb = heads.var_builder(DType::F32, device);
        let encoder = ImageEncoder::new(&config, per_block, fvb.pp("image_encoder")).map_err(map_missing)?;
        let prompt_encoder = PromptEncoder::new(
            config.out_chans,
            config.img_size,
            fvb.pp("prompt_encoder"),
            hvb.pp("prompt_encoder"),
        )
        .map_err(map_missing)?;
        let decoder = MaskDecoder::new(&config, hvb.pp("mask_decoder")).map_err(map_missing)?;

        Ok(AdaptedBackbone {
            variant,
            config,
            lora: LoraConfig {
                rank: lora.rank,
                targets,
            },
            prompt,
            weights: weights.clone(),
            frozen,
            heads,
            adapters,
            encoder,
            prompt_encoder,
            decoder,
            device: device.clone(),
        })
    }

    pub fn variant(&self) -> BackboneVariant {
        self.variant
    }

    pub fn config(&self) -> &SamConfig {
        &self.config
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn prompt_mode(&self) -> PromptMode {
        self.prompt
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.a.as_tensor().elem_count() + a.b.as_tensor().elem_count())
            .sum()
    }

    pub fn adapter_targets(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.target_id.clone()).collect()
    }

    /// Checksum over every frozen tensor.
    pub fn frozen_checksum(&self) -> Result<String> {
        self.frozen.checksum()
    }

    pub fn heads(&self) -> &ParamStore {
        &self.heads
    }

    /// Adapter factors followed by head parameters.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars: Vec<Var> = self
            .adapters
            .iter()
            .flat_map(|a| [a.a.clone(), a.b.clone()])
            .collect();
        vars.extend(self.heads.vars());
        vars
    }

    pub fn adapters(&self) -> Result<Vec<LoraAdapter>> {
        self.adapters
            .iter()
            .map(|v| {
                let a = var_to_array(&v.a)?;
                let b = var_to_array(&v.b)?;
                LoraAdapter::from_parts(v.target_id.clone(), a, b)
            })
            .collect()
    }

    /// Overwrites adapter factors; targets and shapes must match.
    pub fn set_adapters(&self, adapters: &[LoraAdapter]) -> Result<()> {
        if adapters.len() != self.adapters.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} adapters, model has {}",
                adapters.len(),
                self.adapters.len()
            )));
        }
        for (slot, adapter) in self.adapters.iter().zip(adapters) {
            if slot.target_id != adapter.target_id {
                return Err(Error::Checkpoint(format!(
                    "adapter {} found where {} was expected",
                    adapter.target_id, slot.target_id
                )));
            }
            let loaded = adapter_to_vars(adapter, &self.device)?;
            if loaded.a.dims() != slot.a.dims() || loaded.b.dims() != slot.b.dims() {
                return Err(Error::Checkpoint(format!("adapter {} has the wrong shape", adapter.target_id)));
            }
            slot.a.set(loaded.a.as_tensor())?;
            slot.b.set(loaded.b.as_tensor())?;
        }
        Ok(())
    }

    /// Resizes 224-pixel cell images to the backbone resolution and applies
    /// its pixel normalization. Output `(B, 3, S, S)`.
    pub fn preprocess(&self, images: &[&CellImage]) -> Result<Tensor> {
        let s = self.config.img_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for image in images {
            let resized = if s == IMAGE_SIDE {
                image.pixels().clone()
            } else {
                resize_chw(image.pixels(), s, s)
            };
            for (ch, plane) in resized.outer_iter().enumerate() {
                data.extend(plane.iter().map(|v| (v * 255.0 - PIXEL_MEAN[ch]) / PIXEL_STD[ch]));
            }
        }
        Ok(Tensor::from_vec(data, (images.len(), 3, s, s), &self.device)?)
    }

    fn prompts(&self) -> Vec<PointPrompt> {
        match self.prompt {
            PromptMode::CenterPoint => {
                let c = self.config.img_size as f32 / 2.0;
                vec![PointPrompt { x: c, y: c, label: 1 }]
            }
            PromptMode::NoPrompt => Vec::new(),
        }
    }

    /// Embeddings `(B, C, h, w)` and single-mask low-resolution logits `(B, 1, 4h, 4w)`.
    pub fn forward(&self, pixels: &Tensor) -> Result<(Tensor, Tensor)> {
        let embeddings = self.encoder.forward(pixels)?;
        let (b, _, h, w) = embeddings.dims4()?;
        let image_pe = self.prompt_encoder.pe.grid(h, w)?;
        let sparse = self.prompt_encoder.embed_points(&self.prompts(), b)?;
        let dense = self.prompt_encoder.dense(b, h, w)?;
        let (logits, _) = self.decoder.forward(&embeddings, &image_pe, sparse.as_ref(), &dense)?;
        Ok((embeddings, logits))
    }
}

fn adapter_to_vars(adapter: &LoraAdapter, device: &Device) -> Result<AdapterVars> {
    let to_var = |m: &Array2<f32>| -> Result<Var> {
        let (r, c) = m.dim();
        let values: Vec<f32> = m.iter().copied().collect();
        Ok(Var::from_tensor(&Tensor::from_vec(values, (r, c), device)?)?)
    };
    Ok(AdapterVars {
        target_id: adapter.target_id.clone(),
        a: to_var(adapter.a())?,
        b: to_var(adapter.b())?,
    })
}

fn var_to_array(v: &Var) -> Result<Array2<f32>> {
    let (r, c) = v.as_tensor().dims2()?;
    let values = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((r, c), values).map_err(|e| Error::Shape(e.to_string()))
}

/// Logit plane to a binary mask on the 224 grid (probability ≥ 0.5).
pub(crate) fn logits_to_mask(logits: &Tensor) -> Result<SegmentationMask> {
    let (h, w) = logits.dims2()?;
    let values = logits.flatten_all()?.to_vec1::<f32>()?;
    // Resampling clamps to [0, 1], so go through probabilities.
    let probs: Vec<f32> = values.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let plane = Array2::from_shape_vec((h, w), probs).map_err(|e| Error::Shape(e.to_string()))?;
    let plane = if (h, w) == (IMAGE_SIDE, IMAGE_SIDE) {
        plane
    } else {
        resize_plane(&plane, IMAGE_SIDE, IMAGE_SIDE)
    };
    SegmentationMask::new(plane.mapv(|v| (v >= 0.5) as u8))
}

impl Embedder for AdaptedBackbone {
    fn embed_and_segment(&self, image: &CellImage) -> Result<(ImageEmbedding, SegmentationMask)> {
        let pixels = self.preprocess(&[image])?;
        let (emb, logits) = self.forward(&pixels)?;
        let (c, h, w) = emb.get(0)?.dims3()?;
        let values = emb.flatten_all()?.to_vec1::<f32>()?;
        let features = Array3::from_shape_vec((c, h, w), values).map_err(|e| Error::Shape(e.to_string()))?;
        let embedding = ImageEmbedding::new(image.image_id.clone(), image.domain, features)?;
        let mask = logits_to_mask(&logits.get(0)?.get(0)?)?;
        Ok((embedding, mask))
    }

    fn embedding_shape(&self) -> [usize; 3] {
        self.config.embedding_shape()
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "adapted_backbone",
            "variant": self.variant,
            "embedding_position": "post-neck",
            "lora": self.lora,
            "prompt": self.prompt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DomainId, UnifiedClass};

    fn tiny() -> AdaptedBackbone {
        AdaptedBackbone::attach_adapters(
            BackboneVariant::Tiny,
            &LoraConfig::default(),
            &Weights::Random,
            PromptMode::CenterPoint,
            3,
            &Device::Cpu,
        )
        .unwrap()
    }

    #[test]
    fn tiny_adapter_layout() {
        let m = tiny();
        assert_eq!(m.adapter_count(), 4);
        assert_eq!(m.adapter_param_count(), 4 * 4 * (32 + 32));
        assert_eq!(m.adapter_targets()[1], "image_encoder.blocks.0.attn.v");
    }

    #[test]
    fn empty_targets_rejected() {
        let lora = LoraConfig { rank: 4, targets: vec![] };
        let err = AdaptedBackbone::attach_adapters(
            BackboneVariant::Tiny,
            &lora,
            &Weights::Random,
            PromptMode::CenterPoint,
            0,
            &Device::Cpu,
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn large_variant_needs_weights() {
        let lora = LoraConfig::default();
        let random = AdaptedBackbone::attach_adapters(
            BackboneVariant::VitB,
            &lora,
            &Weights::Random,
            PromptMode::CenterPoint,
            0,
            &Device::Cpu,
        );
        assert!(matches!(random, Err(Error::MissingWeights(_))));
        let missing = AdaptedBackbone::attach_adapters(
            BackboneVariant::VitB,
            &lora,
            &Weights::File("/nonexistent/sam_vit_b.safetensors".into()),
            PromptMode::CenterPoint,
            0,
            &Device::Cpu,
        );
        assert!(matches!(missing, Err(Error::MissingWeights(_))));
    }

    #[test]
    fn embed_is_deterministic_and_shaped() {
        let m = tiny();
        let img = CellImage::new(
            "matek19/EOS/a.png",
            Array3::from_shape_fn((3, 224, 224), |(c, r, k)| ((c + r + k) % 7) as f32 / 7.0),
            DomainId::Matek19,
            UnifiedClass::new("eosinophil"),
        )
        .unwrap();
        let (e1, m1) = m.embed_and_segment(&img).unwrap();
        let (e2, m2) = m.embed_and_segment(&img).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(m1, m2);
        assert_eq!(e1.shape(), [32, 8, 8]);
        assert_eq!(m1.dim(), (224, 224));
    }

    #[test]
    fn negative_logits_give_empty_mask() {
        let logits = Tensor::from_vec(vec![-3.0f32; 56 * 56], (56, 56), &Device::Cpu).unwrap();
        assert!(logits_to_mask(&logits).unwrap().is_empty());
        let half: Vec<f32> = (0..56 * 56).map(|i| if i % 56 < 28 { 4.0 } else { -4.0 }).collect();
        let mask = logits_to_mask(&Tensor::from_vec(half, (56, 56), &Device::Cpu).unwrap()).unwrap();
        assert!((mask.foreground_fraction() - 0.5).abs() < 0.01);
        assert!(mask.get(100, 0) && !mask.get(100, 223));
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("vit_b".parse::<BackboneVariant>().unwrap(), BackboneVariant::VitB);
        assert!("vit_x".parse::<BackboneVariant>().is_err());
    }
}
