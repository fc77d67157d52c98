use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::stack;
use super::{mmd, AeConfig, CrossDomainAe, LossBreakdown};
use crate::dataset::{resize_chw, DomainId};
use crate::schedule::WarmupCosine;
use crate::segmenter::EmbeddingStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            lr: 5e-4,
            weight_decay: 0.05,
            epochs: 10,
            batch_size: 32,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

/// Training samples: an embedding and its reconstruction target.
pub trait AeDataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn domain(&self, i: usize) -> DomainId;

    /// Embedding and target, the target resized to `target_side`.
    fn sample(&self, i: usize, target_side: usize) -> Result<(Array3<f32>, Array3<f32>)>;
}

fn fit_target(target: &Array3<f32>, side: usize) -> Array3<f32> {
    let (_, h, w) = target.dim();
    if (h, w) == (side, side) {
        target.clone()
    } else {
        resize_chw(target, side, side)
    }
}

/// Streams samples from an embedding store.
#[derive(Debug)]
pub struct StoreDataset<'a> {
    store: &'a EmbeddingStore,
    ids: Vec<String>,
    domains: Vec<DomainId>,
}

impl<'a> StoreDataset<'a> {
    pub fn new(store: &'a EmbeddingStore) -> Self {
        let (ids, domains) = store
            .index()
            .entries
            .iter()
            .map(|(id, e)| (id.clone(), e.domain))
            .unzip();
        StoreDataset { store, ids, domains }
    }
}

impl AeDataset for StoreDataset<'_> {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn domain(&self, i: usize) -> DomainId {
        self.domains[i]
    }

    fn sample(&self, i: usize, target_side: usize) -> Result<(Array3<f32>, Array3<f32>)> {
        let s = self.store.read(&self.ids[i])?;
        Ok((s.embedding.features().clone(), fit_target(s.target.pixels(), target_side)))
    }
}

/// Samples held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryDataset {
    pub items: Vec<(Array3<f32>, Array3<f32>, DomainId)>,
}

impl MemoryDataset {
    /// Loads a whole store, resizing targets once.
    pub fn from_store(store: &EmbeddingStore, target_side: usize) -> Result<Self> {
        let mut items = Vec::with_capacity(store.len());
        for id in store.ids() {
            let s = store.read(id)?;
            items.push((
                s.embedding.features().clone(),
                fit_target(s.target.pixels(), target_side),
                s.embedding.domain,
            ));
        }
        Ok(MemoryDataset { items })
    }
}

impl AeDataset for MemoryDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn domain(&self, i: usize) -> DomainId {
        self.items[i].2
    }

    fn sample(&self, i: usize, target_side: usize) -> Result<(Array3<f32>, Array3<f32>)> {
        let (e, t, _) = &self.items[i];
        Ok((e.clone(), fit_target(t, target_side)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_ssim: f64,
    pub mean_mmd: f64,
    /// MMD between the two domains' latents over the whole dataset after
    /// this epoch; absent when a domain is missing.
    pub latent_mmd: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub steps_per_epoch: usize,
    pub mmd_disabled: bool,
}

/// Cycles through a shuffled index list, reshuffling at each wrap.
struct Stream {
    ids: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.ids.len() {
            self.ids.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.ids[self.pos - 1]
    }
}

/// Latent MMD between the domains over the whole dataset, encoded in eval mode.
pub(crate) fn dataset_latent_mmd(ae: &CrossDomainAe, data: &dyn AeDataset, batch: usize) -> Result<Option<f64>> {
    let mut za = Vec::new();
    let mut zb = Vec::new();
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let embs: Vec<Array3<f32>> = (start..end).map(|i| data.sample(i, 1).map(|s| s.0)).collect::<Result<_>>()?;
        let refs: Vec<&Array3<f32>> = embs.iter().collect();
        let z = ae.encode(&ae.embeddings_tensor(&refs)?)?.detach();
        for (k, i) in (start..end).enumerate() {
            let row = z.get(k)?;
            if data.domain(i) == DomainId::Matek19 {
                za.push(row);
            } else {
                zb.push(row);
            }
        }
        start = end;
    }
    if za.is_empty() || zb.is_empty() {
        return Ok(None);
    }
    let value = mmd(&Tensor::stack(&za, 0)?, &Tensor::stack(&zb, 0)?, &ae.config().mmd)?;
    Ok(Some(value.to_dtype(DType::F64)?.to_scalar::<f64>()?))
}

/// Trains the autoencoder with AdamW under a warm-up + cosine schedule.
/// Every batch takes half its samples from each domain. A dataset with one
/// domain trains on reconstruction alone and sets `mmd_disabled`.
pub fn train_autoencoder(
    data: &dyn AeDataset,
    ae_config: &AeConfig,
    cfg: &AeTrainConfig,
    device: &Device,
) -> Result<(CrossDomainAe, TrainHistory)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    let ae = CrossDomainAe::new(ae_config, cfg.seed, DType::F32, device)?;
    let side = ae_config.output_side();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut streams: Vec<Stream> = DomainId::ALL
        .iter()
        .map(|d| Stream {
            ids: (0..data.len()).filter(|&i| data.domain(i) == *d).collect(),
            pos: usize::MAX,
        })
        .filter(|s| !s.ids.is_empty())
        .collect();
    for s in &mut streams {
        s.pos = s.ids.len();
    }
    let mmd_disabled = streams.len() < 2;
    if mmd_disabled {
        log::warn!("stage=train-ae only one domain present; MMD term disabled");
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = WarmupCosine::new(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac);
    let mut opt = AdamW::new(
        ae.params().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;

    let mut history = TrainHistory {
        steps_per_epoch,
        mmd_disabled,
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (mut sum_total, mut sum_ssim, mut sum_mmd) = (0.0, 0.0, 0.0);
        for _ in 0..steps_per_epoch {
            let per_stream = cfg.batch_size / streams.len();
            let mut picks = Vec::with_capacity(cfg.batch_size);
            for s in &mut streams {
                for _ in 0..per_stream {
                    picks.push(s.next(&mut rng));
                }
            }
            let samples: Vec<(Array3<f32>, Array3<f32>)> =
                picks.iter().map(|&i| data.sample(i, side)).collect::<Result<_>>()?;
            let embs: Vec<&Array3<f32>> = samples.iter().map(|s| &s.0).collect();
            let targets: Vec<&Array3<f32>> = samples.iter().map(|s| &s.1).collect();
            let domains: Vec<DomainId> = picks.iter().map(|&i| data.domain(i)).collect();
            let out = ae.total_loss(&ae.embeddings_tensor(&embs)?, &stack(&targets, device)?, &domains)?;
            let lr = schedule.lr(step);
            opt.set_learning_rate(lr);
            opt.backward_step(&out.total)?;
            let b = out.breakdown;
            log::info!(
                "stage=train-ae epoch={epoch} step={step} loss={:.6} l_ssim={:.6} l_mmd={:.6} lr={lr:.3e}",
                b.total(),
                b.l_ssim(),
                b.l_mmd()
            );
            sum_total += b.total();
            sum_ssim += b.l_ssim();
            sum_mmd += b.l_mmd();
            history.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: b,
            });
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let latent_mmd = if mmd_disabled {
            None
        } else {
            dataset_latent_mmd(&ae, data, cfg.batch_size)?
        };
        log::info!(
            "stage=train-ae epoch={epoch} mean_loss={:.6} latent_mmd={}",
            sum_total / n,
            latent_mmd.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        history.epochs.push(EpochSummary {
            epoch,
            mean_total: sum_total / n,
            mean_ssim: sum_ssim / n,
            mean_mmd: sum_mmd / n,
            latent_mmd,
        });
    }
    Ok((ae, history))
}
