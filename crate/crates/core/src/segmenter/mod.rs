//! Segmentation backbone with low-rank adapters, mask post-processing and
//! the on-disk embedding cache.

mod backbone;
mod finetune;
mod nn;
mod postprocess;
pub mod sam;
mod store;
mod stub;

use ndarray::{Array2, Array3};

use crate::dataset::{CellImage, DomainId};
use crate::{Error, Result};

pub use backbone::{AdaptedBackbone, BackboneVariant, LoraConfig, PromptMode, Weights};
pub use finetune::{
    finetune_segmentation, load_finetuned, load_mask, mask_path, mean_segmentation_loss, read_checkpoint_meta,
    segmentation_loss, select_annotation_subset,
    FinetuneReport, SegCheckpointMeta, SegTrainConfig,
};
pub use postprocess::{postprocess_crop, GRAY_FILL, MIN_CROP_SIDE};
pub use sam::{PointPrompt, Projection, SamConfig};
pub use store::{cache_embeddings, EmbeddingStore, IndexEntry, StoreIndex, StoredSample};
pub use stub::PatchEmbedder;

/// Backbone feature map for one image, `C × H′ × W′`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub image_id: String,
    pub domain: DomainId,
    features: Array3<f32>,
}

impl ImageEmbedding {
    pub fn new(image_id: impl Into<String>, domain: DomainId, features: Array3<f32>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding contains non-finite values".into()));
        }
        Ok(ImageEmbedding {
            image_id: image_id.into(),
            domain,
            features,
        })
    }

    pub fn features(&self) -> &Array3<f32> {
        &self.features
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.features.dim();
        [c, h, w]
    }
}

/// Binary mask on the cell-image grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    data: Array2<u8>,
}

impl SegmentationMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(SegmentationMask { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        SegmentationMask {
            data: Array2::from_shape_fn((height, width), |(r, c)| f(r, c) as u8),
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| true)
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[(r, c)] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    /// Inclusive bounding box `(r0, r1, c0, c1)` of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for ((r, c), v) in self.data.indexed_iter() {
            if *v == 1 {
                bbox = Some(match bbox {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
        bbox
    }
}

/// Gray-filled square crop around the segmented cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PostProcessedImage {
    pub image_id: String,
    pixels: Array3<f32>,
    /// Set when segmentation found nothing and the whole image was kept.
    pub mask_empty: bool,
}

impl PostProcessedImage {
    pub fn new(image_id: impl Into<String>, pixels: Array3<f32>, mask_empty: bool) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h != w || h == 0 {
            return Err(Error::Shape(format!(
                "post-processed image must be 3×S×S, got {:?}",
                pixels.dim()
            )));
        }
        Ok(PostProcessedImage {
            image_id: image_id.into(),
            pixels,
            mask_empty,
        })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Anything that turns a cell image into an embedding and a mask.
pub trait Embedder: Send + Sync {
    fn embed_and_segment(&self, image: &CellImage) -> Result<(ImageEmbedding, SegmentationMask)>;

    fn embedding_shape(&self) -> [usize; 3];

    /// Description written into the embedding store's index.
    fn metadata(&self) -> serde_json::Value;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_validation_and_bbox() {
        assert!(SegmentationMask::new(Array2::from_elem((2, 2), 2)).is_err());
        let m = SegmentationMask::from_fn(10, 10, |r, c| (3..5).contains(&r) && (6..9).contains(&c));
        assert_eq!(m.bbox(), Some((3, 4, 6, 8)));
        assert_eq!(m.count(), 6);
        assert_eq!(SegmentationMask::from_fn(4, 4, |_, _| false).bbox(), None);
    }

    #[test]
    fn postprocessed_must_be_square() {
        assert!(PostProcessedImage::new("x", Array3::zeros((3, 4, 5)), false).is_err());
        assert!(PostProcessedImage::new("x", Array3::zeros((3, 5, 5)), false).is_ok());
    }
}
