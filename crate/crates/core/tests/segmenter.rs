use std::path::Path;

use bcsam_core::dataset::{scan_dataset, CellImage, DatasetManifest, DomainId, UnifiedClass};
use bcsam_core::segmenter::{
    cache_embeddings, finetune_segmentation, load_finetuned, read_checkpoint_meta, AdaptedBackbone, BackboneVariant,
    Embedder, EmbeddingStore, ImageEmbedding, LoraConfig, PatchEmbedder, PromptMode, SegTrainConfig,
    SegmentationMask, Weights,
};
use bcsam_core::synthetic::{render_cell, synthetic_label_map, write_synthetic_dataset, SyntheticConfig};
use bcsam_core::{Error, Result};
use candle_core::Device;

fn tiny() -> AdaptedBackbone {
    let lora = LoraConfig {
        rank: 4,
        ..LoraConfig::default()
    };
    AdaptedBackbone::attach_adapters(
        BackboneVariant::Tiny,
        &lora,
        &Weights::Random,
        PromptMode::CenterPoint,
        0,
        &Device::Cpu,
    )
    .unwrap()
}

fn sample(class: Option<usize>, seed: u64) -> (CellImage, SegmentationMask) {
    let (rgb, gray) = render_cell(class, DomainId::Matek19, 224, 0.02, seed);
    let label = UnifiedClass::new(if class.is_some() { "cell" } else { "none" });
    let image = CellImage::from_rgb8(format!("matek19/x/{seed}.png"), &rgb, DomainId::Matek19, label).unwrap();
    let mask = SegmentationMask::from_fn(224, 224, |r, c| gray.get_pixel(c as u32, r as u32)[0] > 0);
    (image, mask)
}

#[test]
fn finetune_reduces_loss_and_learns_background() {
    let model = tiny();
    let mut set: Vec<_> = (0..4).map(|i| sample(Some(0), i)).collect();
    set.extend((10..12).map(|i| sample(None, i)));
    let cfg = SegTrainConfig {
        epochs: 150,
        batch_size: 2,
        ..SegTrainConfig::default()
    };
    let out = tempfile::tempdir().unwrap();
    let report = finetune_segmentation(&model, &set, &cfg, out.path()).unwrap();

    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(report.frozen_checksum_before, report.frozen_checksum_after);

    let meta = read_checkpoint_meta(out.path()).unwrap();
    assert_eq!(meta.lr, 5e-4);
    assert_eq!(meta.weight_decay, 0.05);
    assert_eq!(meta.annotated_images, 6);

    // An unseen all-background image comes out nearly empty.
    let (reloaded, _) = load_finetuned(out.path(), &Device::Cpu).unwrap();
    let (background, _) = sample(None, 99);
    let (_, mask) = reloaded.embed_and_segment(&background).unwrap();
    assert!(mask.foreground_fraction() < 0.05, "foreground {}", mask.foreground_fraction());
    let (_, mask_direct) = model.embed_and_segment(&background).unwrap();
    assert_eq!(mask, mask_direct);
    let (cell, truth) = sample(Some(0), 98);
    let (_, mask) = reloaded.embed_and_segment(&cell).unwrap();
    let overlap = (0..224 * 224).filter(|i| mask.get(i / 224, i % 224) && truth.get(i / 224, i % 224)).count();
    assert!(overlap as f64 > 0.5 * truth.count() as f64, "overlap {overlap} of {}", truth.count());
}

/// Stub embedder that fails on one image id, standing in for a crash mid-run.
struct Flaky {
    inner: PatchEmbedder,
    fail_on: Option<String>,
}

impl Embedder for Flaky {
    fn embed_and_segment(&self, image: &CellImage) -> Result<(ImageEmbedding, SegmentationMask)> {
        if self.fail_on.as_deref() == Some(image.image_id.as_str()) {
            return Err(Error::InvalidArgument("simulated crash".into()));
        }
        self.inner.embed_and_segment(image)
    }

    fn embedding_shape(&self) -> [usize; 3] {
        self.inner.embedding_shape()
    }

    fn metadata(&self) -> serde_json::Value {
        self.inner.metadata()
    }
}

fn synthetic_manifest(root: &Path) -> DatasetManifest {
    let cfg = SyntheticConfig {
        per_class: 2,
        side: 48,
        seed: 5,
        noise: 0.02,
    };
    let ds = write_synthetic_dataset(root, &cfg).unwrap();
    scan_dataset(&ds.domain_roots[&DomainId::Matek19], DomainId::Matek19, &synthetic_label_map()).unwrap()
}

#[test]
fn interrupted_cache_resumes_to_a_consistent_store() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synthetic_manifest(data.path());
    assert!(manifest.len() >= 8);
    let crash_at = manifest.entries[5].image_id.clone();

    let out = tempfile::tempdir().unwrap();
    let flaky = Flaky {
        inner: PatchEmbedder::new(8, 8, 0),
        fail_on: Some(crash_at.clone()),
    };
    assert!(cache_embeddings(&manifest, &flaky, out.path(), 2).is_err());

    // The index left behind parses and every entry it lists is intact.
    let partial = EmbeddingStore::open(out.path()).unwrap();
    assert!(!partial.is_empty() && partial.len() < manifest.len());
    assert!(partial.entry(&crash_at).is_none());
    assert!(partial.damaged_ids().is_empty());

    // Leftovers of a write that never finished must not confuse the resume.
    std::fs::write(out.path().join("blobs").join("half-written.tmp"), b"\x00\x01").unwrap();

    let healthy = Flaky {
        inner: PatchEmbedder::new(8, 8, 0),
        fail_on: None,
    };
    let resumed = cache_embeddings(&manifest, &healthy, out.path(), 2).unwrap();
    assert_eq!(resumed.len(), manifest.len());
    assert!(resumed.damaged_ids().is_empty());

    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = cache_embeddings(&manifest, &healthy, fresh_dir.path(), 64).unwrap();
    assert_eq!(resumed.index().entries, fresh.index().entries);
    for id in manifest.entries.iter().map(|e| e.image_id.as_str()) {
        assert_eq!(resumed.read(id).unwrap(), fresh.read(id).unwrap());
    }
}
