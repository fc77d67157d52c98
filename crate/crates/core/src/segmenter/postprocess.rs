use ndarray::Array3;

use super::{PostProcessedImage, SegmentationMask};
use crate::dataset::CellImage;
use crate::{Error, Result};

/// Value written to every channel of pixels outside the mask.
pub const GRAY_FILL: f32 = 128.0 / 255.0;

/// Smallest side of a crop, so tiny masks still give a usable image.
pub const MIN_CROP_SIDE: usize = 32;

/// Gray-fills pixels outside the mask, then crops the smallest square (side at
/// least [`MIN_CROP_SIDE`]) centered on the mask's bounding box. Parts of the
/// square beyond the image are gray. An empty mask returns the image untouched
/// with `mask_empty` set.
pub fn postprocess_crop(image: &CellImage, mask: &SegmentationMask) -> Result<PostProcessedImage> {
    let pixels = image.pixels();
    let (_, h, w) = pixels.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask is {:?}, image is {h}×{w}",
            mask.dim()
        )));
    }
    let Some((r0, r1, c0, c1)) = mask.bbox() else {
        return PostProcessedImage::new(image.image_id.clone(), pixels.clone(), true);
    };
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let side = bh.max(bw).max(MIN_CROP_SIDE);
    let top = r0 as isize - ((side - bh) / 2) as isize;
    let left = c0 as isize - ((side - bw) / 2) as isize;
    let out = Array3::from_shape_fn((3, side, side), |(ch, i, j)| {
        let r = top + i as isize;
        let c = left + j as isize;
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            return GRAY_FILL;
        }
        let (r, c) = (r as usize, c as usize);
        if mask.get(r, c) {
            pixels[(ch, r, c)]
        } else {
            GRAY_FILL
        }
    });
    PostProcessedImage::new(image.image_id.clone(), out, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DomainId, UnifiedClass};

    fn image() -> CellImage {
        let px = Array3::from_shape_fn((3, 224, 224), |(c, r, k)| ((c * 31 + r * 7 + k) % 97) as f32 / 97.0);
        CellImage::new("acevedo20/ig/x.jpg", px, DomainId::Acevedo20, UnifiedClass::new("immature_granulocyte")).unwrap()
    }

    #[test]
    fn full_mask_is_identity() {
        let img = image();
        let out = postprocess_crop(&img, &SegmentationMask::full(224, 224)).unwrap();
        assert_eq!(out.pixels(), img.pixels());
        assert!(!out.mask_empty);
    }

    #[test]
    fn single_pixel_mask() {
        let img = image();
        let mask = SegmentationMask::from_fn(224, 224, |r, c| r == 10 && c == 10);
        let out = postprocess_crop(&img, &mask).unwrap();
        assert_eq!(out.side(), 32);
        // 31 spare rows split 15 above, 16 below: the pixel sits at (15, 15).
        for ch in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    let v = out.pixels()[(ch, i, j)];
                    if (i, j) == (15, 15) {
                        assert_eq!(v, img.pixels()[(ch, 10, 10)]);
                    } else {
                        assert_eq!(v, GRAY_FILL);
                    }
                }
            }
        }
    }

    #[test]
    fn rectangle_mask_uses_longer_side() {
        let img = image();
        let mask = SegmentationMask::from_fn(224, 224, |r, c| (100..150).contains(&r) && (60..100).contains(&c));
        let out = postprocess_crop(&img, &mask).unwrap();
        assert_eq!(out.side(), 50);
        // Columns 55..105 cover the 40-wide box with 5 spare on each side.
        assert_eq!(out.pixels()[(0, 0, 5)], img.pixels()[(0, 100, 60)]);
        assert_eq!(out.pixels()[(0, 0, 4)], GRAY_FILL);
    }

    #[test]
    fn empty_mask_falls_back() {
        let img = image();
        let out = postprocess_crop(&img, &SegmentationMask::from_fn(224, 224, |_, _| false)).unwrap();
        assert!(out.mask_empty);
        assert_eq!(out.pixels(), img.pixels());
    }

    #[test]
    fn size_mismatch_errors() {
        assert!(postprocess_crop(&image(), &SegmentationMask::full(10, 10)).is_err());
    }
}
