//! Backbone-free embedder for CPU-scale runs. The mask marks pixels that
//! differ from the border color; the embedding is a fixed random linear mix
//! of the downsampled color and mask planes.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Embedder, ImageEmbedding, SegmentationMask};
use crate::dataset::{resize_chw, CellImage};
use crate::Result;

#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    grid: usize,
    threshold: f32,
    seed: u64,
    /// `channels × 4` mixing matrix over (r, g, b, mask).
    mix: Array2<f32>,
}

impl PatchEmbedder {
    pub fn new(channels: usize, grid: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = Array2::from_shape_simple_fn((channels, 4), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            (v / 2.0) as f32
        });
        PatchEmbedder {
            grid,
            threshold: 0.12,
            seed,
            mix,
        }
    }

    fn border_color(pixels: &Array3<f32>) -> [f32; 3] {
        let (_, h, w) = pixels.dim();
        let mut out = [0.0; 3];
        for (ch, slot) in out.iter_mut().enumerate() {
            let mut border: Vec<f32> = Vec::with_capacity(2 * (h + w));
            for c in 0..w {
                border.push(pixels[(ch, 0, c)]);
                border.push(pixels[(ch, h - 1, c)]);
            }
            for r in 0..h {
                border.push(pixels[(ch, r, 0)]);
                border.push(pixels[(ch, r, w - 1)]);
            }
            let mid = border.len() / 2;
            border.select_nth_unstable_by(mid, f32::total_cmp);
            *slot = border[mid];
        }
        out
    }

    pub fn segment(&self, image: &CellImage) -> SegmentationMask {
        let pixels = image.pixels();
        let bg = Self::border_color(pixels);
        let (_, h, w) = pixels.dim();
        SegmentationMask::from_fn(h, w, |r, c| {
            let d: f32 = (0..3).map(|ch| (pixels[(ch, r, c)] - bg[ch]).abs()).sum();
            d > self.threshold
        })
    }
}

impl Embedder for PatchEmbedder {
    fn embed_and_segment(&self, image: &CellImage) -> Result<(ImageEmbedding, SegmentationMask)> {
        let mask = self.segment(image);
        let (_, h, w) = image.pixels().dim();
        let mut planes = Array3::<f32>::zeros((4, h, w));
        planes.slice_mut(ndarray::s![0..3, .., ..]).assign(image.pixels());
        planes
            .slice_mut(ndarray::s![3, .., ..])
            .assign(&mask.data().mapv(|v| v as f32));
        let small = resize_chw(&planes, self.grid, self.grid);
        let channels = self.mix.nrows();
        let mut features = Array3::<f32>::zeros((channels, self.grid, self.grid));
        for k in 0..channels {
            for i in 0..4 {
                let wgt = self.mix[(k, i)];
                features
                    .index_axis_mut(ndarray::Axis(0), k)
                    .scaled_add(wgt, &small.index_axis(ndarray::Axis(0), i));
            }
        }
        Ok((ImageEmbedding::new(image.image_id.clone(), image.domain, features)?, mask))
    }

    fn embedding_shape(&self) -> [usize; 3] {
        [self.mix.nrows(), self.grid, self.grid]
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "patch_stub",
            "embedding_position": "color+mask planes, random linear mix",
            "seed": self.seed,
            "threshold": self.threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DomainId, UnifiedClass};

    #[test]
    fn segments_blob_on_flat_background() {
        let px = Array3::from_shape_fn((3, 224, 224), |(_, r, c)| {
            let d2 = (r as f32 - 112.0).powi(2) + (c as f32 - 112.0).powi(2);
            if d2 < 900.0 { 0.2 } else { 0.8 }
        });
        let img = CellImage::new("m/x/y.png", px, DomainId::Matek19, UnifiedClass::new("monocyte")).unwrap();
        let stub = PatchEmbedder::new(8, 16, 0);
        let (e, m) = stub.embed_and_segment(&img).unwrap();
        assert_eq!(e.shape(), [8, 16, 16]);
        let frac = m.foreground_fraction();
        let expected = std::f64::consts::PI * 900.0 / (224.0 * 224.0);
        assert!((frac - expected).abs() < 0.01, "{frac} vs {expected}");
    }
}
