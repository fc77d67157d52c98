use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{AdaptedBackbone, BackboneVariant, LoraConfig, PromptMode, Weights};
use super::SegmentationMask;
use crate::dataset::{CellImage, DatasetManifest, UnifiedClass, IMAGE_SIDE};
use crate::lora::{load_adapters, save_adapters, AdapterCheckpoint};
use crate::schedule::WarmupCosine;
use crate::tensor_io::{write_atomic, TensorArchive};
use crate::{Error, Result};

const ADAPTER_STEM: &str = "adapters";
const HEADS_STEM: &str = "heads";
const META_FILE: &str = "training.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            lr: 5e-4,
            weight_decay: 0.05,
            epochs: 85,
            batch_size: 4,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

/// Contents of `training.json` in a fine-tuning checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegCheckpointMeta {
    pub variant: BackboneVariant,
    pub lora: LoraConfig,
    pub prompt: PromptMode,
    pub weights: Weights,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub train: SegTrainConfig,
    pub annotated_images: usize,
    pub epoch_losses: Vec<f64>,
    pub frozen_checksum: String,
    pub embedding_position: String,
}

/// Mean of soft Dice loss and per-pixel binary cross-entropy on logits.
pub fn segmentation_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let bce = ((logits.relu()? - (logits * targets)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?.mean_all()?;
    let probs = candle_nn::ops::sigmoid(logits)?.flatten_from(1)?;
    let t = targets.flatten_from(1)?;
    let inter = (&probs * &t)?.sum(1)?;
    let denom = (probs.sum(1)? + t.sum(1)?)?;
    let dice = ((inter.affine(2.0, 1.0)? / denom.affine(1.0, 1.0)?)?.neg()? + 1.0)?.mean_all()?;
    Ok(((bce + dice)? * 0.5)?)
}

/// Nearest-neighbor downsampling of 224-grid masks to the logit grid, `(B, 1, L, L)`.
fn mask_targets(masks: &[&SegmentationMask], side: usize, device: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * side * side);
    for m in masks {
        let (h, w) = m.dim();
        for i in 0..side {
            let r = ((i as f64 + 0.5) * h as f64 / side as f64) as usize;
            for j in 0..side {
                let c = ((j as f64 + 0.5) * w as f64 / side as f64) as usize;
                data.push(m.get(r.min(h - 1), c.min(w - 1)) as u8 as f32);
            }
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, side, side), device)?)
}

fn batch_loss(model: &AdaptedBackbone, batch: &[&(CellImage, SegmentationMask)]) -> Result<Tensor> {
    let images: Vec<&CellImage> = batch.iter().map(|(i, _)| i).collect();
    let masks: Vec<&SegmentationMask> = batch.iter().map(|(_, m)| m).collect();
    let pixels = model.preprocess(&images)?;
    let (_, logits) = model.forward(&pixels)?;
    let targets = mask_targets(&masks, model.config().low_res_side(), model.device())?;
    segmentation_loss(&logits, &targets)
}

/// Mean segmentation loss over a set, without updating anything.
pub fn mean_segmentation_loss(model: &AdaptedBackbone, set: &[(CellImage, SegmentationMask)]) -> Result<f64> {
    let mut total = 0.0;
    for item in set {
        let loss = batch_loss(model, &[item])?.detach();
        total += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / set.len().max(1) as f64)
}

fn validate_annotations(annotated: &[(CellImage, SegmentationMask)]) -> Result<()> {
    if annotated.is_empty() {
        return Err(Error::InvalidArgument("no annotated images for fine-tuning".into()));
    }
    for (image, mask) in annotated {
        if mask.dim() != (IMAGE_SIDE, IMAGE_SIDE) {
            return Err(Error::Shape(format!(
                "mask for {} is {:?}, expected {IMAGE_SIDE}×{IMAGE_SIDE}",
                image.image_id,
                mask.dim()
            )));
        }
    }
    Ok(())
}

/// Trains adapters and heads on the annotated images and writes the
/// checkpoint (adapters, heads, `training.json`) into `out`.
pub fn finetune_segmentation(
    model: &AdaptedBackbone,
    annotated: &[(CellImage, SegmentationMask)],
    cfg: &SegTrainConfig,
    out: &Path,
) -> Result<FinetuneReport> {
    validate_annotations(annotated)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let before = model.frozen_checksum()?;
    let steps_per_epoch = annotated.len().div_ceil(cfg.batch_size);
    let schedule = WarmupCosine::new(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac);
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..annotated.len()).collect();
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &annotated[i]).collect();
            opt.set_learning_rate(schedule.lr(step));
            let loss = batch_loss(model, &batch)?;
            opt.backward_step(&loss)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            log::info!("stage=finetune-seg epoch={epoch} step={step} loss={value:.6} lr={:.3e}", schedule.lr(step));
            step_losses.push(value);
            sum += value;
            step += 1;
        }
        epoch_losses.push(sum / steps_per_epoch as f64);
    }
    let after = model.frozen_checksum()?;
    if before != after {
        return Err(Error::Checkpoint("frozen backbone weights changed during fine-tuning".into()));
    }
    let report = FinetuneReport {
        step_losses,
        epoch_losses,
        frozen_checksum_before: before,
        frozen_checksum_after: after,
    };
    save_finetuned(model, cfg, annotated.len(), &report, out)?;
    Ok(report)
}

fn save_finetuned(
    model: &AdaptedBackbone,
    cfg: &SegTrainConfig,
    annotated_images: usize,
    report: &FinetuneReport,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_adapters(&model.adapters()?).write(out, ADAPTER_STEM)?;
    model
        .heads()
        .to_archive()?
        .write(out, HEADS_STEM, serde_json::json!({"component": "prompt_encoder+mask_decoder"}))?;
    let meta = SegCheckpointMeta {
        variant: model.variant(),
        lora: model.lora_config().clone(),
        prompt: model.prompt_mode(),
        weights: model.weights().clone(),
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        seed: cfg.seed,
        train: cfg.clone(),
        annotated_images,
        epoch_losses: report.epoch_losses.clone(),
        frozen_checksum: report.frozen_checksum_after.clone(),
        embedding_position: "post-neck".into(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("training metadata", e))?;
    write_atomic(&out.join(META_FILE), text.as_bytes())
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<SegCheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Rebuilds a fine-tuned model from its checkpoint directory.
pub fn load_finetuned(dir: &Path, device: &Device) -> Result<(AdaptedBackbone, SegCheckpointMeta)> {
    let meta = read_checkpoint_meta(dir)?;
    let model = AdaptedBackbone::attach_adapters(meta.variant, &meta.lora, &meta.weights, meta.prompt, meta.seed, device)?;
    if model.frozen_checksum()? != meta.frozen_checksum {
        return Err(Error::Checkpoint(
            "backbone weights differ from the ones used for fine-tuning".into(),
        ));
    }
    let adapters = load_adapters(&AdapterCheckpoint::read(dir, ADAPTER_STEM)?)?;
    model.set_adapters(&adapters)?;
    let (heads, _) = TensorArchive::read(dir, HEADS_STEM)?;
    model.heads().load_archive(&heads)?;
    Ok((model, meta))
}

/// Stratified random subset: per unified class, `fraction` of its images
/// (at least one). Returned ids are sorted.
pub fn select_annotation_subset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("annotation fraction {fraction} not in (0, 1]")));
    }
    let mut by_class: BTreeMap<&UnifiedClass, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(&e.unified_label).or_default().push(&e.image_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let take = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
        chosen.extend(ids[..take].iter().map(|s| s.to_string()));
    }
    chosen.sort();
    Ok(chosen)
}

/// Mask file for an image id: `<root>/<domain>/<raw_label>/<stem>.png`.
pub fn mask_path(root: &Path, image_id: &str) -> PathBuf {
    root.join(Path::new(image_id).with_extension("png"))
}

/// Reads a binary mask image (values {0, 255} or {0, 1}), resized to the
/// cell grid with nearest-neighbor sampling if needed.
pub fn load_mask(path: &Path) -> Result<SegmentationMask> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            image_id: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let max = img.pixels().map(|p| p.0[0]).max().unwrap_or(0);
    let on = if max <= 1 { 1 } else { 255 };
    if let Some(p) = img.pixels().find(|p| p.0[0] != 0 && p.0[0] != on) {
        return Err(Error::InvalidArgument(format!(
            "mask {} is not binary (value {})",
            path.display(),
            p.0[0]
        )));
    }
    let side = IMAGE_SIDE as u32;
    let img = if img.dimensions() == (side, side) {
        img
    } else {
        image::imageops::resize(&img, side, side, image::imageops::FilterType::Nearest)
    };
    let data = Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(r, c)| {
        (img.get_pixel(c as u32, r as u32).0[0] == on) as u8
    });
    SegmentationMask::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_is_lower_for_matching_logits() {
        let dev = Device::Cpu;
        let t = Tensor::from_vec(vec![1f32, 0., 1., 0.], (1, 1, 2, 2), &dev).unwrap();
        let good = t.affine(20.0, -10.0).unwrap();
        let bad = t.affine(-20.0, 10.0).unwrap();
        let lg = segmentation_loss(&good, &t).unwrap().to_scalar::<f32>().unwrap();
        let lb = segmentation_loss(&bad, &t).unwrap().to_scalar::<f32>().unwrap();
        assert!(lg < 0.01 && lb > 0.9, "{lg} {lb}");
    }

    #[test]
    fn non_binary_mask_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        image::GrayImage::from_fn(8, 8, |x, _| image::Luma([(x * 30) as u8])).save(&p).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::InvalidArgument(_))));
        let q = dir.path().join("ok.png");
        image::GrayImage::from_fn(224, 224, |x, _| image::Luma([if x < 10 { 255 } else { 0 }])).save(&q).unwrap();
        assert_eq!(load_mask(&q).unwrap().count(), 224 * 10);
    }

    #[test]
    fn nearest_targets() {
        let m = SegmentationMask::from_fn(224, 224, |r, _| r < 112);
        let t = mask_targets(&[&m], 4, &Device::Cpu).unwrap();
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..8], &[1.0; 8]);
        assert_eq!(&v[8..], &[0.0; 8]);
    }
}
