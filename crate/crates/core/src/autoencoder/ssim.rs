//! Structural similarity with an 11×11 Gaussian window (σ = 1.5),
//! `C1 = (0.01·L)²`, `C2 = (0.03·L)²`, zero padding so the map has the input's
//! size, averaged over channels and pixels.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - half;
                (-(x * x) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// Separable blur of the last two dims with zero padding ("same" output).
/// With a symmetric kernel the operator is self-adjoint, so the backward
/// pass is the same blur applied to the incoming gradient.
#[derive(Debug, Clone)]
struct SeparableBlur {
    taps: Vec<f64>,
}

impl SeparableBlur {
    fn run<T: Copy + Into<f64> + FromF64>(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let r = self.taps.len() / 2;
        let mut out = Vec::with_capacity(src.len());
        let mut row_pass = vec![0f64; h * w];
        for plane in src.chunks_exact(h * w) {
            for i in 0..h {
                let row = &plane[i * w..(i + 1) * w];
                let dst = &mut row_pass[i * w..(i + 1) * w];
                for (j, d) in dst.iter_mut().enumerate() {
                    let lo = j.saturating_sub(r);
                    let hi = (j + r).min(w - 1);
                    let mut acc = 0.0;
                    for (jj, x) in row.iter().enumerate().take(hi + 1).skip(lo) {
                        acc += self.taps[jj + r - j] * (*x).into();
                    }
                    *d = acc;
                }
            }
            let start = out.len();
            out.resize(start + h * w, T::from_f64(0.0));
            let dst = &mut out[start..];
            for i in 0..h {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(h - 1);
                let drow = &mut dst[i * w..(i + 1) * w];
                let mut acc = vec![0f64; w];
                for ii in lo..=hi {
                    let g = self.taps[ii + r - i];
                    for (a, x) in acc.iter_mut().zip(&row_pass[ii * w..(ii + 1) * w]) {
                        *a += g * x;
                    }
                }
                for (d, a) in drow.iter_mut().zip(acc) {
                    *d = T::from_f64(a);
                }
            }
        }
        out
    }
}

trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl candle_core::CustomOp1 for SeparableBlur {
    fn name(&self) -> &'static str {
        "separable-gaussian-blur"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let dims = layout.shape().dims();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("blur input must be contiguous");
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(&v[start..end], h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(&v[start..end], h, w)),
            _ => candle_core::bail!("blur supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(self.clone())?))
    }
}

fn gaussian_blur(x: &Tensor, cfg: &SsimConfig) -> candle_core::Result<Tensor> {
    if x.device().is_cpu() {
        return x.contiguous()?.apply_op1(SeparableBlur { taps: cfg.taps() });
    }
    let (n, c, h, w) = x.dims4()?;
    let k = cfg.window;
    let pad = k / 2;
    let taps = Tensor::new(cfg.taps(), x.device())?.to_dtype(x.dtype())?;
    let row = taps.reshape((1, 1, 1, k))?;
    let col = taps.reshape((1, 1, k, 1))?;
    let planes = x.reshape((n * c, 1, h, w))?;
    let planes = planes.pad_with_zeros(3, pad, pad)?.conv2d(&row, 0, 1, 1, 1)?;
    let planes = planes.pad_with_zeros(2, pad, pad)?.conv2d(&col, 0, 1, 1, 1)?;
    planes.reshape((n, c, h, w))
}

/// Per-sample SSIM for two `(B, C, H, W)` batches. Differentiable.
pub fn ssim_per_sample(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    if a.dims() != b.dims() || a.rank() != 4 {
        return Err(Error::Shape(format!(
            "ssim needs two equal (B, C, H, W) tensors, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let bsz = a.dim(0)?;
    let stacked = Tensor::cat(&[a, b, &a.sqr()?, &b.sqr()?, &(a * b)?], 0)?;
    let blurred = gaussian_blur(&stacked, cfg)?;
    let mu_a = blurred.narrow(0, 0, bsz)?;
    let mu_b = blurred.narrow(0, bsz, bsz)?;
    let e_aa = blurred.narrow(0, 2 * bsz, bsz)?;
    let e_bb = blurred.narrow(0, 3 * bsz, bsz)?;
    let e_ab = blurred.narrow(0, 4 * bsz, bsz)?;
    let mu_ab = (&mu_a * &mu_b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let var_a = (e_aa - &mu_aa)?;
    let var_b = (e_bb - &mu_bb)?;
    let cov = (e_ab - &mu_ab)?;
    let num = (mu_ab.affine(2.0, cfg.c1())? * cov.affine(2.0, cfg.c2())?)?;
    let den = ((mu_aa + mu_bb)?.affine(1.0, cfg.c1())? * (var_a + var_b)?.affine(1.0, cfg.c2())?)?;
    let map = (num / den)?;
    Ok(map.flatten_from(1)?.mean(1)?)
}

/// SSIM of two CHW images, computed in double precision.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>, cfg: &SsimConfig) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let to_tensor = |x: &Array3<f32>| -> Result<Tensor> {
        let (c, h, w) = x.dim();
        let values: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(Tensor::from_vec(values, (1, c, h, w), &Device::Cpu)?)
    };
    let s = ssim_per_sample(&to_tensor(a)?, &to_tensor(b)?, cfg)?;
    Ok(s.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

/// `1 − SSIM(m, c)`.
pub fn ssim_loss(m: &Array3<f32>, c: &Array3<f32>, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - ssim(m, c, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_simple_fn((c, h, w), || rng.random::<f32>())
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let taps = SsimConfig::default().taps();
        assert_eq!(taps.len(), 11);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(taps[0], taps[10]);
    }

    #[test]
    fn identity_and_loss_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_image(&mut rng, 3, 20, 17);
        let cfg = SsimConfig::default();
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim_loss(&x, &x, &cfg).unwrap().abs() < 1e-9);
    }

    #[test]
    fn loss_range_and_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SsimConfig::default();
        for _ in 0..5 {
            let a = random_image(&mut rng, 3, 16, 16);
            let b = random_image(&mut rng, 3, 16, 16);
            let s = ssim(&a, &b, &cfg).unwrap();
            let l = ssim_loss(&a, &b, &cfg).unwrap();
            assert_eq!(l, 1.0 - s);
            assert!((0.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn blur_kernel_matches_convolution() {
        let cfg = SsimConfig::default();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 13, 17), &Device::Cpu).unwrap();
        let fast = gaussian_blur(&x, &cfg).unwrap();
        let taps = Tensor::new(cfg.taps(), &Device::Cpu).unwrap();
        let planes = x.reshape((6, 1, 13, 17)).unwrap();
        let slow = planes
            .pad_with_zeros(3, 5, 5).unwrap()
            .conv2d(&taps.reshape((1, 1, 1, 11)).unwrap(), 0, 1, 1, 1).unwrap()
            .pad_with_zeros(2, 5, 5).unwrap()
            .conv2d(&taps.reshape((1, 1, 11, 1)).unwrap(), 0, 1, 1, 1).unwrap()
            .reshape((2, 3, 13, 17)).unwrap();
        let diff = (fast - slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn blur_gradient_is_self_adjoint() {
        let cfg = SsimConfig::default();
        let x = candle_core::Var::randn(0f64, 1.0, (1, 1, 9, 12), &Device::Cpu).unwrap();
        let y = Tensor::randn(0f64, 1.0, (1, 1, 9, 12), &Device::Cpu).unwrap();
        let loss = (gaussian_blur(x.as_tensor(), &cfg).unwrap() * &y).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap();
        let expected = gaussian_blur(&y, &cfg).unwrap();
        let diff = (g - expected).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Array3::<f32>::zeros((3, 8, 8));
        let b = Array3::<f32>::zeros((3, 8, 9));
        assert!(ssim(&a, &b, &SsimConfig::default()).is_err());
    }

    #[test]
    fn inverted_image_is_dissimilar() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 1, 32, 32);
        let b = a.mapv(|v| 1.0 - v);
        assert!(ssim(&a, &b, &SsimConfig::default()).unwrap() < 0.0);
    }
}
