//! Pipeline configuration: defaults, JSON file, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bcsam_core::classifiers::{ClassifierFamily, ClassifierSpec};
use bcsam_core::dataset::DomainId;
use bcsam_core::segmenter::{BackboneVariant, LoraConfig, PromptMode, Weights};
use serde::{Deserialize, Serialize};

pub const SNAPSHOT_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// `vit_b`, `vit_l`, `vit_h`, `tiny`, or `stub` for the backbone-free embedder.
    pub variant: String,
    /// Safetensors checkpoint; absent means seeded random weights (tiny only).
    pub weights: Option<PathBuf>,
    pub prompt: PromptMode,
    pub stub_channels: usize,
    pub stub_grid: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: "vit_b".into(),
            weights: None,
            prompt: PromptMode::CenterPoint,
            stub_channels: 256,
            stub_grid: 64,
        }
    }
}

impl BackboneConfig {
    pub fn is_stub(&self) -> bool {
        self.variant.eq_ignore_ascii_case("stub")
    }

    pub fn sam_variant(&self) -> Result<BackboneVariant> {
        Ok(self.variant.parse()?)
    }

    pub fn weights(&self) -> Weights {
        match &self.weights {
            Some(p) => Weights::File(p.clone()),
            None => Weights::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_seg: usize,
    pub epochs_ae: usize,
    pub warmup_frac: f64,
    pub batch_seg: usize,
    pub batch_ae: usize,
    pub seed: u64,
    /// Share of each class with a ground-truth mask used for fine-tuning.
    pub annotation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 5e-4,
            weight_decay: 0.05,
            epochs_seg: 85,
            epochs_ae: 10,
            warmup_frac: 0.1,
            batch_seg: 4,
            batch_ae: 32,
            seed: 0,
            annotation_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderLayout {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
}

impl Default for AutoencoderLayout {
    fn default() -> Self {
        let d = bcsam_core::autoencoder::AeConfig::default();
        AutoencoderLayout {
            encoder_channels: d.encoder_channels,
            decoder_channels: d.decoder_channels,
        }
    }
}

/// A family name (`"svm_rbf"`) or a full spec with hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassifierEntry {
    Name(String),
    Spec(ClassifierSpec),
}

impl ClassifierEntry {
    pub fn spec(&self) -> Result<ClassifierSpec> {
        let spec = match self {
            ClassifierEntry::Name(n) => ClassifierSpec::parse(n)?,
            ClassifierEntry::Spec(s) => s.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub datasets: BTreeMap<DomainId, PathBuf>,
    /// Absent means the built-in mapping.
    pub label_map: Option<PathBuf>,
    /// Ground-truth masks laid out like the images; needed for fine-tuning.
    pub masks_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub training: TrainingConfig,
    pub lambda: f64,
    pub autoencoder: AutoencoderLayout,
    pub classifiers: Vec<ClassifierEntry>,
    /// Folds of the cross-domain protocol.
    pub k: usize,
    /// Embedding store index flush interval.
    pub flush_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            datasets: BTreeMap::new(),
            label_map: None,
            masks_root: None,
            output_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            lora: LoraConfig::default(),
            training: TrainingConfig::default(),
            lambda: 5.0,
            autoencoder: AutoencoderLayout::default(),
            classifiers: ClassifierFamily::ALL
                .iter()
                .map(|f| ClassifierEntry::Name(f.as_str().to_string()))
                .collect(),
            k: 5,
            flush_every: 64,
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub backbone: Option<String>,
    pub weights: Option<PathBuf>,
    pub masks_root: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub datasets: BTreeMap<DomainId, PathBuf>,
    pub epochs_seg: Option<usize>,
    pub epochs_ae: Option<usize>,
    pub batch_ae: Option<usize>,
    pub lambda: Option<f64>,
    pub classifiers: Option<Vec<String>>,
    pub k: Option<usize>,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults, then `path` if given, then `flags`; the result is validated
    /// and classifier names are expanded to full specs.
    pub fn resolve(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.classifiers = cfg
            .classifiers
            .iter()
            .map(|c| c.spec().map(ClassifierEntry::Spec))
            .collect::<Result<_>>()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.training.seed = v;
        }
        if let Some(v) = &o.backbone {
            self.backbone.variant = v.clone();
        }
        if let Some(v) = &o.weights {
            self.backbone.weights = Some(v.clone());
        }
        if let Some(v) = &o.masks_root {
            self.masks_root = Some(v.clone());
        }
        if let Some(v) = &o.label_map {
            self.label_map = Some(v.clone());
        }
        for (d, p) in &o.datasets {
            self.datasets.insert(*d, p.clone());
        }
        if let Some(v) = o.epochs_seg {
            self.training.epochs_seg = v;
        }
        if let Some(v) = o.epochs_ae {
            self.training.epochs_ae = v;
        }
        if let Some(v) = o.batch_ae {
            self.training.batch_ae = v;
        }
        if let Some(v) = o.lambda {
            self.lambda = v;
        }
        if let Some(v) = &o.classifiers {
            self.classifiers = v.iter().map(|n| ClassifierEntry::Name(n.clone())).collect();
        }
        if let Some(v) = o.k {
            self.k = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.backbone.is_stub() {
            self.backbone.sam_variant()?;
        }
        if self.backbone.stub_channels == 0 || self.backbone.stub_grid == 0 {
            bail!("stub embedder needs positive channels and grid");
        }
        if self.k < 2 {
            bail!("k must be at least 2, got {}", self.k);
        }
        if self.classifiers.is_empty() {
            bail!("no classifiers configured");
        }
        if self.flush_every == 0 {
            bail!("flush_every must be positive");
        }
        if !(self.lambda >= 0.0) {
            bail!("lambda must be non-negative, got {}", self.lambda);
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<Vec<ClassifierSpec>> {
        self.classifiers.iter().map(ClassifierEntry::spec).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes `config.resolved.json` into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        let path = self.output_dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_json()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let c = PipelineConfig::default();
        assert_eq!(c.training.lr, 0.0005);
        assert_eq!(c.training.weight_decay, 0.05);
        assert_eq!(c.training.epochs_seg, 85);
        assert_eq!(c.training.epochs_ae, 10);
        assert_eq!(c.lambda, 5.0);
        assert_eq!(c.lora.rank, 4);
        assert_eq!(c.k, 5);
        assert_eq!(c.classifiers.len(), 5);
    }

    #[test]
    fn flags_beat_file_and_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"lambda": 2.0, "k": 3, "classifiers": ["rf"], "training": {"epochs_ae": 4}}"#).unwrap();
        let flags = Overrides {
            k: Some(4),
            output_dir: Some(dir.path().join("out")),
            ..Default::default()
        };
        let c = PipelineConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!((c.lambda, c.k, c.training.epochs_ae, c.training.lr), (2.0, 4, 4, 5e-4));
        assert!(matches!(&c.classifiers[0], ClassifierEntry::Spec(s) if s.family() == ClassifierFamily::Rf));
        let snap = c.write_snapshot().unwrap();
        let again = PipelineConfig::resolve(Some(&snap), &Overrides::default()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), std::fs::read_to_string(&snap).unwrap());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"lamda": 2.0}"#).unwrap();
        assert!(PipelineConfig::resolve(Some(&path), &Overrides::default()).is_err());
        let flags = Overrides {
            classifiers: Some(vec!["knn".into()]),
            ..Default::default()
        };
        assert!(PipelineConfig::resolve(None, &flags).is_err());
    }
}
