//! Low-rank adapters: a frozen weight `W` (C_out×C_in) is adapted as
//! `W + B·A` with `A` r×C_in and `B` C_out×r. There is no `alpha / r`
//! scaling; the update is applied as is.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor_io::{decode_f32, encode_f32, write_atomic, TensorRecord};
use crate::{Error, Result};

pub const DEFAULT_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target_id: String,
    a: Array2<f32>,
    b: Array2<f32>,
}

impl LoraAdapter {
    /// `A` drawn from N(0, 1/r) (variance 1/r), `B` zero, so the adapted
    /// layer starts out identical to the frozen one.
    pub fn init(target_id: impl Into<String>, c_in: usize, c_out: usize, r: usize, seed: u64) -> Result<Self> {
        if r == 0 || r > c_in.min(c_out) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} must be in [1, min({c_in}, {c_out})]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, (1.0 / r as f32).sqrt()).expect("valid normal");
        let a = Array2::from_shape_simple_fn((r, c_in), || normal.sample(&mut rng));
        let b = Array2::zeros((c_out, r));
        Ok(LoraAdapter {
            target_id: target_id.into(),
            a,
            b,
        })
    }

    pub fn from_parts(target_id: impl Into<String>, a: Array2<f32>, b: Array2<f32>) -> Result<Self> {
        let r = a.nrows();
        if r == 0 || b.ncols() != r {
            return Err(Error::Shape(format!(
                "A is {:?} and B is {:?}; need A r×C_in and B C_out×r with r ≥ 1",
                a.dim(),
                b.dim()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("adapter contains non-finite values".into()));
        }
        Ok(LoraAdapter {
            target_id: target_id.into(),
            a,
            b,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn c_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn c_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn a(&self) -> &Array2<f32> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f32> {
        &self.b
    }

    /// Trainable parameter count, `r·(C_in + C_out)`.
    pub fn num_params(&self) -> usize {
        self.rank() * (self.c_in() + self.c_out())
    }

    /// The low-rank update `B·A`.
    pub fn delta(&self) -> Array2<f32> {
        self.b.dot(&self.a)
    }

    fn check_weight(&self, w: &ArrayView2<f32>) -> Result<()> {
        if w.dim() != (self.c_out(), self.c_in()) {
            return Err(Error::Shape(format!(
                "frozen weight is {:?}, adapter {} expects ({}, {})",
                w.dim(),
                self.target_id,
                self.c_out(),
                self.c_in()
            )));
        }
        Ok(())
    }
}

/// `W + B·A`.
pub fn merge_weights(w: ArrayView2<f32>, adapter: &LoraAdapter) -> Result<Array2<f32>> {
    adapter.check_weight(&w)?;
    Ok(&w + &adapter.delta())
}

/// Applies the adapted layer to a batch of row vectors (N×C_in) without
/// materializing the merged weight: `x·Wᵀ + (x·Aᵀ)·Bᵀ`.
pub fn adapted_forward(x: ArrayView2<f32>, w: ArrayView2<f32>, adapter: &LoraAdapter) -> Result<Array2<f32>> {
    adapter.check_weight(&w)?;
    if x.ncols() != adapter.c_in() {
        return Err(Error::Shape(format!(
            "input has {} features, adapter {} expects {}",
            x.ncols(),
            adapter.target_id,
            adapter.c_in()
        )));
    }
    let frozen = x.dot(&w.t());
    let low = x.dot(&adapter.a.t()).dot(&adapter.b.t());
    Ok(frozen + low)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub target_id: String,
    pub r: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub format: String,
    pub dtype: String,
    pub byte_order: String,
    pub adapters: Vec<AdapterRecord>,
}

/// Portable adapter checkpoint: JSON manifest plus little-endian `f32` blob, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterCheckpoint {
    pub manifest: AdapterManifest,
    pub blob: Vec<u8>,
}

const FORMAT: &str = "lora-adapter/v1";

pub fn save_adapter(adapter: &LoraAdapter) -> AdapterCheckpoint {
    save_adapters(std::slice::from_ref(adapter))
}

pub fn save_adapters(adapters: &[LoraAdapter]) -> AdapterCheckpoint {
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(adapters.len());
    for ad in adapters {
        let mut tensors = Vec::with_capacity(2);
        for (name, m) in [("A", &ad.a), ("B", &ad.b)] {
            let values: Vec<f32> = m.iter().copied().collect();
            let bytes = encode_f32(&values);
            tensors.push(TensorRecord {
                name: name.to_string(),
                shape: vec![m.nrows(), m.ncols()],
                offset: blob.len(),
                len: bytes.len(),
            });
            blob.extend_from_slice(&bytes);
        }
        records.push(AdapterRecord {
            target_id: ad.target_id.clone(),
            r: ad.rank(),
            c_in: ad.c_in(),
            c_out: ad.c_out(),
            tensors,
        });
    }
    AdapterCheckpoint {
        manifest: AdapterManifest {
            format: FORMAT.to_string(),
            dtype: "f32".to_string(),
            byte_order: "little".to_string(),
            adapters: records,
        },
        blob,
    }
}

/// Loads a checkpoint that must hold exactly one adapter.
pub fn load_adapter(ckpt: &AdapterCheckpoint) -> Result<LoraAdapter> {
    let mut all = load_adapters(ckpt)?;
    if all.len() != 1 {
        return Err(Error::Checkpoint(format!(
            "expected a single adapter, found {}",
            all.len()
        )));
    }
    Ok(all.remove(0))
}

pub fn load_adapters(ckpt: &AdapterCheckpoint) -> Result<Vec<LoraAdapter>> {
    let m = &ckpt.manifest;
    if m.format != FORMAT || m.dtype != "f32" || m.byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported adapter format {}/{}/{}",
            m.format, m.dtype, m.byte_order
        )));
    }
    let described: usize = m.adapters.iter().flat_map(|a| &a.tensors).map(|t| t.len).sum();
    if described != ckpt.blob.len() {
        return Err(Error::Checkpoint(format!(
            "manifest describes {described} bytes, blob holds {}",
            ckpt.blob.len()
        )));
    }
    m.adapters
        .iter()
        .map(|rec| {
            let fetch = |name: &str, shape: (usize, usize)| -> Result<Array2<f32>> {
                let t = rec.tensors.iter().find(|t| t.name == name).ok_or_else(|| {
                    Error::Checkpoint(format!("adapter {} lacks tensor {name}", rec.target_id))
                })?;
                if t.shape != [shape.0, shape.1] || t.len != shape.0 * shape.1 * 4 {
                    return Err(Error::Checkpoint(format!(
                        "adapter {} tensor {name}: shape {:?} / {} bytes, expected {:?}",
                        rec.target_id, t.shape, t.len, shape
                    )));
                }
                let bytes = ckpt.blob.get(t.offset..t.offset + t.len).ok_or_else(|| {
                    Error::Checkpoint(format!("adapter {} tensor {name} out of bounds", rec.target_id))
                })?;
                Ok(Array2::from_shape_vec(shape, decode_f32(bytes)).expect("length checked"))
            };
            let a = fetch("A", (rec.r, rec.c_in))?;
            let b = fetch("B", (rec.c_out, rec.r))?;
            LoraAdapter::from_parts(rec.target_id.clone(), a, b)
        })
        .collect()
}

impl AdapterCheckpoint {
    pub fn manifest_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes")
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(format!("{stem}.bin")), &self.blob)?;
        write_atomic(&dir.join(format!("{stem}.json")), &self.manifest_bytes())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let json = dir.join(format!("{stem}.json"));
        let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let manifest = serde_json::from_slice(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", json.display())))?;
        let bin = dir.join(format!("{stem}.bin"));
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Ok(AdapterCheckpoint { manifest, blob })
    }
}
