//! Maximum mean discrepancy between two latent batches.
//!
//! Biased (V-statistic) estimate of MMD² under a sum of Gaussian kernels
//! `Σ_s exp(−‖x − y‖² / (s·m))`, where `m` is the median squared distance
//! over distinct pairs of the joint batch and `s` runs over the configured
//! multipliers. The bandwidth stays in the autograd graph.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub bandwidth_multipliers: Vec<f64>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth_multipliers: vec![0.5, 1.0, 2.0],
        }
    }
}

/// Squared Euclidean distances between all rows of `z`, clamped at zero.
fn pairwise_sq_distances(z: &Tensor) -> candle_core::Result<Tensor> {
    let sq = z.sqr()?.sum_keepdim(1)?;
    let gram = z.matmul(&z.t()?)?;
    sq.broadcast_add(&sq.t()?)?.broadcast_sub(&gram.affine(2.0, 0.0)?)?.relu()
}

/// Median squared distance of distinct pairs, as a scalar tensor tied to `dist`.
fn median_bandwidth(dist: &Tensor) -> Result<Tensor> {
    let n = dist.dim(0)?;
    if n < 2 {
        return Ok(Tensor::new(1.0, dist.device())?.to_dtype(dist.dtype())?);
    }
    let values = dist.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate().skip(i + 1) {
            pairs.push((*v, i * n + j));
        }
    }
    let mid = (pairs.len() - 1) / 2;
    let (_, &mut (value, flat), _) =
        pairs.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if value <= f64::EPSILON {
        return Ok(Tensor::new(1.0, dist.device())?.to_dtype(dist.dtype())?);
    }
    Ok(dist.flatten_all()?.narrow(0, flat, 1)?.reshape(())?)
}

/// MMD² between `(n, d)` and `(m, d)` latent batches; a non-negative scalar tensor.
pub fn mmd(za: &Tensor, zb: &Tensor, cfg: &MmdConfig) -> Result<Tensor> {
    let (n, d_a) = za.dims2()?;
    let (m, d_b) = zb.dims2()?;
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("mmd needs two non-empty batches".into()));
    }
    if d_a != d_b {
        return Err(Error::Shape(format!("latent dims differ: {d_a} vs {d_b}")));
    }
    let z = Tensor::cat(&[za, zb], 0)?;
    let dist = pairwise_sq_distances(&z)?;
    let bandwidth = median_bandwidth(&dist)?;
    let mut kernel: Option<Tensor> = None;
    for s in &cfg.bandwidth_multipliers {
        let k = dist.broadcast_div(&bandwidth.affine(*s, 0.0)?)?.neg()?.exp()?;
        kernel = Some(match kernel {
            Some(acc) => (acc + k)?,
            None => k,
        });
    }
    let kernel = kernel.ok_or_else(|| Error::InvalidArgument("no MMD bandwidths configured".into()))?;
    let k_aa = kernel.narrow(0, 0, n)?.narrow(1, 0, n)?.mean_all()?;
    let k_bb = kernel.narrow(0, n, m)?.narrow(1, n, m)?.mean_all()?;
    let k_ab = kernel.narrow(0, 0, n)?.narrow(1, n, m)?.mean_all()?;
    Ok(((k_aa + k_bb)? - k_ab.affine(2.0, 0.0)?)?.relu()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn batch(rows: usize, dim: usize, seed: u64, shift: f64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..rows * dim)
            .map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Tensor::from_vec(v, (rows, dim), &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_batches_give_zero() {
        let a = batch(20, 50, 1, 0.0);
        assert!(scalar(&mmd(&a, &a, &MmdConfig::default()).unwrap()) <= 1e-9);
    }

    #[test]
    fn common_permutation_invariance() {
        let a = batch(12, 5, 2, 0.0);
        let b = batch(9, 5, 3, 0.5);
        let cfg = MmdConfig::default();
        let base = scalar(&mmd(&a, &b, &cfg).unwrap());
        let pa = Tensor::new(&[3u32, 0, 11, 5, 7, 1, 2, 4, 6, 8, 9, 10], &Device::Cpu).unwrap();
        let pb = Tensor::new(&[8u32, 7, 6, 5, 4, 3, 2, 1, 0], &Device::Cpu).unwrap();
        let permuted = scalar(&mmd(&a.index_select(&pa, 0).unwrap(), &b.index_select(&pb, 0).unwrap(), &cfg).unwrap());
        assert!((base - permuted).abs() < 1e-12, "{base} vs {permuted}");
    }

    #[test]
    fn shifted_is_larger_than_same_distribution() {
        let cfg = MmdConfig::default();
        let same = scalar(&mmd(&batch(64, 10, 4, 0.0), &batch(64, 10, 5, 0.0), &cfg).unwrap());
        let shifted = scalar(&mmd(&batch(64, 10, 4, 0.0), &batch(64, 10, 5, 3.0), &cfg).unwrap());
        assert!(shifted > 5.0 * same, "{shifted} vs {same}");
    }

    #[test]
    fn empty_batch_errors() {
        let a = batch(4, 3, 1, 0.0);
        let empty = Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(mmd(&a, &empty, &MmdConfig::default()).is_err());
    }
}
