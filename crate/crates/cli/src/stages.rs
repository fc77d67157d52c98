//! One function per pipeline stage. Every stage reads its inputs from and
//! writes its outputs under the run's output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bcsam_core::autoencoder::{
    extract_features, train_autoencoder, AeConfig, AeDataset, AeTrainConfig, CrossDomainAe, FeatureTable,
    MemoryDataset, StoreDataset,
};
use bcsam_core::classifiers::ClassifierSpec;
use bcsam_core::dataset::{
    load_image, scan_dataset, CellImage, stratified_folds, DatasetManifest, DomainId, FoldAssignment, LabelMap,
};
use bcsam_core::device::device_from_env;
use bcsam_core::eval::{render_report, run_protocol, EvaluationReport};
use bcsam_core::segmenter::{
    cache_embeddings, finetune_segmentation, load_finetuned, load_mask, mask_path, read_checkpoint_meta,
    select_annotation_subset, AdaptedBackbone, Embedder, EmbeddingStore, ImageEmbedding, PatchEmbedder,
    SegTrainConfig, SegmentationMask,
};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

/// Keep the autoencoder training set in memory below this many bytes.
const IN_MEMORY_LIMIT: usize = 1 << 30;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        RunLayout { root: root.to_path_buf() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn label_map(&self) -> PathBuf {
        self.root.join("label_map.json")
    }

    pub fn folds(&self, d: DomainId) -> PathBuf {
        self.root.join("folds").join(format!("{d}.json"))
    }

    pub fn segmenter(&self) -> PathBuf {
        self.root.join("segmenter")
    }

    pub fn store(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn autoencoder(&self) -> PathBuf {
        self.root.join("autoencoder")
    }

    pub fn history(&self) -> PathBuf {
        self.autoencoder().join("history.json")
    }

    pub fn features_all(&self) -> PathBuf {
        self.root.join("features").join("all.csv")
    }

    pub fn features(&self, d: DomainId) -> PathBuf {
        self.root.join("features").join(format!("{d}.csv"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(layout: &RunLayout) -> Result<DatasetManifest> {
    let path = layout.manifest();
    DatasetManifest::load(&path).with_context(|| format!("loading {} (run `ingest` first)", path.display()))
}

pub fn ingest(cfg: &PipelineConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.output_dir);
    if cfg.datasets.is_empty() {
        bail!("no dataset roots configured (set `datasets` or pass --matek19 / --acevedo20)");
    }
    let label_map = match &cfg.label_map {
        Some(p) => LabelMap::load(p).with_context(|| format!("loading label map {}", p.display()))?,
        None => LabelMap::builtin(),
    };
    let mut parts = Vec::new();
    for (domain, root) in &cfg.datasets {
        let part = scan_dataset(root, *domain, &label_map)
            .with_context(|| format!("scanning {domain} at {}", root.display()))?;
        log::info!("stage=ingest step=scan domain={domain} images={}", part.len());
        parts.push(part);
    }
    let manifest = DatasetManifest::merge(parts)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    manifest.save(&layout.manifest())?;
    label_map.save(&layout.label_map())?;
    for domain in manifest.domains() {
        let folds = stratified_folds(&manifest.domain(domain), cfg.k, cfg.training.seed)?;
        let path = layout.folds(domain);
        std::fs::create_dir_all(path.parent().expect("folds dir"))?;
        folds.save(&path)?;
        log::info!("stage=ingest step=folds domain={domain} k={} hash={}", cfg.k, folds.hash());
    }
    log::info!("stage=ingest step=done images={}", manifest.len());
    Ok(())
}

fn seg_train_config(cfg: &PipelineConfig) -> SegTrainConfig {
    SegTrainConfig {
        lr: cfg.training.lr,
        weight_decay: cfg.training.weight_decay,
        epochs: cfg.training.epochs_seg,
        batch_size: cfg.training.batch_seg,
        warmup_frac: cfg.training.warmup_frac,
        seed: cfg.training.seed,
    }
}

pub fn finetune_seg(cfg: &PipelineConfig) -> Result<()> {
    if cfg.backbone.is_stub() {
        log::info!("stage=finetune-seg step=skip reason=stub_embedder");
        return Ok(());
    }
    let layout = RunLayout::new(&cfg.output_dir);
    let manifest = load_manifest(&layout)?;
    let variant = cfg.backbone.sam_variant()?;
    let weights = cfg.backbone.weights();
    let train = seg_train_config(cfg);
    let ids = select_annotation_subset(&manifest, cfg.training.annotation_fraction, cfg.training.seed)?;
    let out = layout.segmenter();
    if let Ok(meta) = read_checkpoint_meta(&out) {
        if meta.variant == variant
            && meta.lora == cfg.lora
            && meta.prompt == cfg.backbone.prompt
            && meta.weights == weights
            && meta.train == train
            && meta.annotated_images == ids.len()
        {
            log::info!("stage=finetune-seg step=skip reason=up_to_date");
            return Ok(());
        }
    }
    let Some(masks_root) = &cfg.masks_root else {
        bail!("fine-tuning needs `masks_root` (or --masks-root)");
    };
    let mut annotated: Vec<(CellImage, SegmentationMask)> = Vec::with_capacity(ids.len());
    for entry in manifest.entries.iter().filter(|e| ids.binary_search(&e.image_id).is_ok()) {
        let image = load_image(entry)?;
        let mask = load_mask(&mask_path(masks_root, &entry.image_id))?;
        annotated.push((image, mask));
    }
    log::info!("stage=finetune-seg step=load annotated={}", annotated.len());
    let device = device_from_env()?;
    let model = AdaptedBackbone::attach_adapters(
        variant,
        &cfg.lora,
        &weights,
        cfg.backbone.prompt,
        cfg.training.seed,
        &device,
    )?;
    let report = finetune_segmentation(&model, &annotated, &train, &out)?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        log::info!("stage=finetune-seg step=epoch epoch={epoch} loss={loss:.6}");
    }
    Ok(())
}

/// Embedder whose store metadata also pins the checkpoint it came from.
struct Pinned<'a> {
    inner: &'a dyn Embedder,
    checkpoint: Value,
}

impl Embedder for Pinned<'_> {
    fn embed_and_segment(&self, image: &CellImage) -> bcsam_core::Result<(ImageEmbedding, SegmentationMask)> {
        self.inner.embed_and_segment(image)
    }

    fn embedding_shape(&self) -> [usize; 3] {
        self.inner.embedding_shape()
    }

    fn metadata(&self) -> Value {
        let mut m = self.inner.metadata();
        m["checkpoint"] = self.checkpoint.clone();
        m
    }
}

pub fn embed(cfg: &PipelineConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.output_dir);
    let manifest = load_manifest(&layout)?;
    let store = if cfg.backbone.is_stub() {
        let stub = PatchEmbedder::new(cfg.backbone.stub_channels, cfg.backbone.stub_grid, cfg.training.seed);
        cache_embeddings(&manifest, &stub, &layout.store(), cfg.flush_every)?
    } else {
        let device = device_from_env()?;
        let dir = layout.segmenter();
        let (model, meta) =
            load_finetuned(&dir, &device).with_context(|| format!("loading {} (run `finetune-seg` first)", dir.display()))?;
        let pinned = Pinned {
            inner: &model,
            checkpoint: serde_json::to_value(&meta)?,
        };
        cache_embeddings(&manifest, &pinned, &layout.store(), cfg.flush_every)?
    };
    let damaged = store.damaged_ids();
    if !damaged.is_empty() {
        log::warn!("stage=embed step=check damaged={}", damaged.len());
    }
    log::info!("stage=embed step=done cached={} shape={:?}", store.len(), store.embedding_shape());
    Ok(())
}

fn open_store(layout: &RunLayout) -> Result<EmbeddingStore> {
    let dir = layout.store();
    EmbeddingStore::open(&dir).with_context(|| format!("opening {} (run `embed` first)", dir.display()))
}

pub fn ae_config(cfg: &PipelineConfig, in_channels: usize) -> AeConfig {
    AeConfig {
        in_channels,
        encoder_channels: cfg.autoencoder.encoder_channels.clone(),
        decoder_channels: cfg.autoencoder.decoder_channels.clone(),
        lambda: cfg.lambda,
        ..AeConfig::default()
    }
}

fn ae_train_config(cfg: &PipelineConfig) -> AeTrainConfig {
    AeTrainConfig {
        lr: cfg.training.lr,
        weight_decay: cfg.training.weight_decay,
        epochs: cfg.training.epochs_ae,
        batch_size: cfg.training.batch_ae,
        warmup_frac: cfg.training.warmup_frac,
        seed: cfg.training.seed,
    }
}

pub fn train_ae(cfg: &PipelineConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.output_dir);
    let store = open_store(&layout)?;
    let ae_cfg = ae_config(cfg, store.embedding_shape()[0]);
    ae_cfg.validate()?;
    let train = ae_train_config(cfg);
    let index = serde_json::to_vec(store.index())?;
    let fingerprint = json!({
        "autoencoder": ae_cfg,
        "train": train,
        "store_sha256": sha256_hex(&index),
    });
    let out = layout.autoencoder();
    let device = device_from_env()?;
    if let Ok((_, extra)) = CrossDomainAe::load(&out, &device) {
        if extra.get("fingerprint") == Some(&fingerprint) {
            log::info!("stage=train-ae step=skip reason=up_to_date");
            return Ok(());
        }
    }
    let side = ae_cfg.output_side();
    let [c, h, w] = store.embedding_shape();
    let bytes = store.len() * 4 * (c * h * w + 3 * side * side);
    let memory;
    let streamed;
    let data: &dyn AeDataset = if bytes <= IN_MEMORY_LIMIT {
        memory = MemoryDataset::from_store(&store, side)?;
        &memory
    } else {
        streamed = StoreDataset::new(&store);
        &streamed
    };
    log::info!("stage=train-ae step=start samples={} side={side} in_memory={}", data.len(), bytes <= IN_MEMORY_LIMIT);
    let (ae, history) = train_autoencoder(data, &ae_cfg, &train, &device)?;
    for e in &history.epochs {
        log::info!(
            "stage=train-ae step=epoch epoch={} loss={:.6} ssim_loss={:.6} mmd={:.6} latent_mmd={}",
            e.epoch,
            e.mean_total,
            e.mean_ssim,
            e.mean_mmd,
            e.latent_mmd.map_or("none".to_string(), |v| format!("{v:.6}"))
        );
    }
    ae.save(&out, json!({ "fingerprint": fingerprint }))?;
    write_text(&layout.history(), &(serde_json::to_string_pretty(&history)? + "\n"))?;
    Ok(())
}

pub fn features(cfg: &PipelineConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.output_dir);
    let store = open_store(&layout)?;
    let device = device_from_env()?;
    let dir = layout.autoencoder();
    let (ae, _) = CrossDomainAe::load(&dir, &device).with_context(|| format!("loading {} (run `train-ae` first)", dir.display()))?;
    let table = extract_features(&store, &ae)?;
    let all = layout.features_all();
    std::fs::create_dir_all(all.parent().expect("features dir"))?;
    table.write_csv(&all)?;
    for d in DomainId::ALL {
        let part = table.domain(d);
        if !part.is_empty() {
            part.write_csv(&layout.features(d))?;
        }
        log::info!("stage=features step=write domain={d} rows={}", part.len());
    }
    Ok(())
}

fn read_features(path: &Path) -> Result<FeatureTable> {
    FeatureTable::read_csv(path).with_context(|| format!("reading features {}", path.display()))
}

fn read_folds(path: &Path) -> Result<FoldAssignment> {
    FoldAssignment::load(path).with_context(|| format!("reading folds {}", path.display()))
}

/// Runs every spec on one direction and adds the results to `report`.
pub fn evaluate_pair(
    report: &mut EvaluationReport,
    src: &FeatureTable,
    tgt: &FeatureTable,
    folds: &FoldAssignment,
    specs: &[ClassifierSpec],
    seed: u64,
) -> Result<()> {
    for spec in specs {
        let run = run_protocol(src, tgt, spec, folds, seed)?;
        log::info!(
            "stage=evaluate step=cell family={} train={} test_source={:.2} test_target={:.2}",
            spec.family(),
            run.source_domain,
            run.source.mean,
            run.target.mean
        );
        report.add_run(&run)?;
    }
    Ok(())
}

/// Both directions from the run directory's features and folds.
pub fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.output_dir);
    let specs = cfg.specs()?;
    let mut report = EvaluationReport::new();
    let tables: Vec<(DomainId, FeatureTable)> = DomainId::ALL
        .iter()
        .map(|d| read_features(&layout.features(*d)).map(|t| (*d, t)))
        .collect::<Result<_>>()?;
    for (d, src) in &tables {
        let folds = read_folds(&layout.folds(*d))?;
        let (_, tgt) = tables.iter().find(|(t, _)| *t == d.other()).expect("both domains");
        evaluate_pair(&mut report, src, tgt, &folds, &specs, cfg.training.seed)?;
    }
    // The output directory is left out so replays elsewhere hash the same.
    let mut hashed = cfg.clone();
    hashed.output_dir = PathBuf::new();
    report
        .metadata
        .extra
        .insert("config_sha256".into(), Value::String(sha256_hex(hashed.to_json().as_bytes())));
    write_text(&layout.report_json(), &report.to_json())?;
    log::info!("stage=evaluate step=done out={}", layout.report_json().display());
    Ok(())
}

/// Explicit-file evaluation of one direction.
pub fn evaluate_files(
    features_src: &Path,
    features_tgt: &Path,
    folds: &Path,
    specs: &[ClassifierSpec],
    seed: u64,
    out: &Path,
) -> Result<()> {
    let src = read_features(features_src)?;
    let tgt = read_features(features_tgt)?;
    let folds = read_folds(folds)?;
    let mut report = EvaluationReport::new();
    evaluate_pair(&mut report, &src, &tgt, &folds, specs, seed)?;
    write_text(out, &report.to_json())?;
    log::info!("stage=evaluate step=done out={}", out.display());
    Ok(())
}

pub fn report_files(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report = EvaluationReport::from_json(&text)?;
    let (_, md) = render_report(&report);
    write_text(out, &md)?;
    log::info!("stage=report step=done out={}", out.display());
    Ok(())
}

pub fn report(cfg: &PipelineConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.output_dir);
    report_files(&layout.report_json(), &layout.report_md())
}

pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    ingest(cfg)?;
    finetune_seg(cfg)?;
    embed(cfg)?;
    train_ae(cfg)?;
    features(cfg)?;
    evaluate(cfg)?;
    report(cfg)
}
