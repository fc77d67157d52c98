//! Named parameter storage behind candle's `VarBuilder`.
//!
//! A store is either frozen (plain tensors) or trainable (`Var`s handed to
//! the optimizer). Values come from a pretrained tensor map when one is
//! attached; otherwise they are drawn from a generator seeded by
//! `(seed, name)`, so initialization does not depend on creation order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::tensor_io::TensorArchive;
use crate::{Error, Result};

#[derive(Debug, Clone)]
enum Entry {
    Frozen(Tensor),
    Trainable(Var),
}

impl Entry {
    fn tensor(&self) -> &Tensor {
        match self {
            Entry::Frozen(t) => t,
            Entry::Trainable(v) => v.as_tensor(),
        }
    }
}

#[derive(Clone)]
pub struct ParamStore {
    seed: u64,
    trainable: bool,
    allow_random: bool,
    pretrained: Option<Arc<HashMap<String, Tensor>>>,
    entries: Arc<Mutex<BTreeMap<String, Entry>>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("trainable", &self.trainable)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn frozen(seed: u64) -> Self {
        Self::new(seed, false)
    }

    pub fn trainable(seed: u64) -> Self {
        Self::new(seed, true)
    }

    fn new(seed: u64, trainable: bool) -> Self {
        ParamStore {
            seed,
            trainable,
            allow_random: true,
            pretrained: None,
            entries: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    /// Attaches pretrained values. With `strict`, any name missing from the map is an error.
    pub fn with_pretrained(mut self, tensors: Arc<HashMap<String, Tensor>>, strict: bool) -> Self {
        self.pretrained = Some(tensors);
        self.allow_random = !strict;
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        let backend: Box<dyn SimpleBackend> = Box::new(self.clone());
        VarBuilder::from_backend(backend, dtype, device.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("param lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.lock().expect("param lock").keys().cloned().collect()
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.entries
            .lock()
            .expect("param lock")
            .values()
            .filter_map(|e| match e {
                Entry::Trainable(v) => Some(v.clone()),
                Entry::Frozen(_) => None,
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .lock()
            .expect("param lock")
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor().clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.entries
            .lock()
            .expect("param lock")
            .get(name)
            .map(|e| e.tensor().clone())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and `f32` bytes of every tensor.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new();
        for (name, t) in self.tensors() {
            let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            archive.push(name, t.dims(), &values)?;
        }
        Ok(archive)
    }

    /// Overwrites every parameter with the archive's value. The name sets must match exactly.
    pub fn load_archive(&self, archive: &TensorArchive) -> Result<()> {
        let mut entries = self.entries.lock().expect("param lock");
        let missing: Vec<_> = entries
            .keys()
            .filter(|k| archive.record(k).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("archive lacks parameters {missing:?}")));
        }
        for record in &archive.records {
            let entry = entries.get_mut(&record.name).ok_or_else(|| {
                Error::Checkpoint(format!("archive has unexpected parameter {}", record.name))
            })?;
            let current = entry.tensor();
            if current.dims() != record.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, archive holds {:?}",
                    record.name,
                    current.dims(),
                    record.shape
                )));
            }
            let (shape, values) = archive.get(&record.name)?;
            let value = Tensor::from_vec(values, shape, current.device())?.to_dtype(current.dtype())?;
            match entry {
                Entry::Trainable(v) => v.set(&value)?,
                Entry::Frozen(t) => *t = value,
            }
        }
        Ok(())
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let digest = Sha256::digest(name.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(bytes))
    }

    fn sample(&self, shape: &Shape, name: &str, init: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.rng_for(name);
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Kaiming { dist, fan, non_linearity } => {
                let fan = fan.for_shape(shape).max(1);
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                }
            }
        };
        Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        if let Some(existing) = self.entries.lock().expect("param lock").get(name) {
            let t = existing.tensor();
            if t.shape() != &s {
                candle_core::bail!("parameter {name} requested as {s:?} but stored as {:?}", t.shape());
            }
            return Ok(t.clone());
        }
        let value = match self.pretrained.as_ref().and_then(|p| p.get(name)) {
            Some(t) => {
                if t.shape() != &s {
                    candle_core::bail!(
                        "pretrained tensor {name} has shape {:?}, model expects {s:?}",
                        t.shape()
                    );
                }
                t.to_device(dev)?.to_dtype(dtype)?
            }
            None if self.allow_random => self.sample(&s, name, h, dtype, dev)?,
            None => {
                return Err(candle_core::Error::CannotFindTensor {
                    path: name.to_string(),
                }
                .bt())
            }
        };
        let entry = if self.trainable {
            Entry::Trainable(Var::from_tensor(&value)?)
        } else {
            Entry::Frozen(value)
        };
        let out = entry.tensor().clone();
        self.entries
            .lock()
            .expect("param lock")
            .insert(name.to_string(), entry);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        match self.entries.lock().expect("param lock").get(name) {
            Some(e) => e.tensor().to_device(dev)?.to_dtype(dtype),
            None => Err(candle_core::Error::CannotFindTensor {
                path: name.to_string(),
            }
            .bt()),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.entries.lock().expect("param lock").contains_key(name)
            || self.pretrained.as_ref().is_some_and(|p| p.contains_key(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_depends_on_name_not_order() {
        let a = ParamStore::frozen(3);
        let b = ParamStore::frozen(3);
        let vb_a = a.var_builder(DType::F32, &Device::Cpu);
        let vb_b = b.var_builder(DType::F32, &Device::Cpu);
        let x1 = vb_a.get_with_hints((4, 4), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let _ = vb_b.get_with_hints(7, "y", candle_nn::init::ZERO).unwrap();
        let x2 = vb_b.get_with_hints((4, 4), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        assert_eq!(x1.to_vec2::<f32>().unwrap(), x2.to_vec2::<f32>().unwrap());
        assert_eq!(a.checksum().unwrap(), ParamStore::checksum(&{
            let c = ParamStore::frozen(3);
            c.var_builder(DType::F32, &Device::Cpu)
                .get_with_hints((4, 4), "x", candle_nn::init::DEFAULT_KAIMING_NORMAL)
                .unwrap();
            c
        }).unwrap());
    }

    #[test]
    fn strict_pretrained_reports_missing() {
        let store = ParamStore::frozen(0).with_pretrained(Arc::new(HashMap::new()), true);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        assert!(vb.get(3, "missing").is_err());
    }

    #[test]
    fn archive_round_trip_restores_vars() {
        let store = ParamStore::trainable(1);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        vb.get_with_hints((2, 3), "w", candle_nn::init::DEFAULT_KAIMING_UNIFORM).unwrap();
        let saved = store.to_archive().unwrap();
        store.vars()[0].set(&Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        store.load_archive(&saved).unwrap();
        assert_eq!(store.to_archive().unwrap(), saved);
    }
}
