use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::{DomainId, ManifestEntry, UnifiedClass};
use crate::{Error, Result};

/// Side length every cell image is resized to.
pub const IMAGE_SIDE: usize = 224;

/// RGB image in CHW layout, 3×224×224, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellImage {
    pub image_id: String,
    pixels: Array3<f32>,
    pub domain: DomainId,
    pub unified_label: UnifiedClass,
}

impl CellImage {
    pub fn new(
        image_id: impl Into<String>,
        pixels: Array3<f32>,
        domain: DomainId,
        unified_label: UnifiedClass,
    ) -> Result<Self> {
        if pixels.dim() != (3, IMAGE_SIDE, IMAGE_SIDE) {
            return Err(Error::Shape(format!(
                "cell image must be 3x{IMAGE_SIDE}x{IMAGE_SIDE}, got {:?}",
                pixels.dim()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(CellImage {
            image_id: image_id.into(),
            pixels,
            domain,
            unified_label,
        })
    }

    /// Builds a cell image from an 8-bit RGB buffer of any size, resizing bilinearly.
    pub fn from_rgb8(
        image_id: impl Into<String>,
        rgb: &RgbImage,
        domain: DomainId,
        unified_label: UnifiedClass,
    ) -> Result<Self> {
        let side = IMAGE_SIDE as u32;
        let resized;
        let rgb = if rgb.dimensions() == (side, side) {
            rgb
        } else {
            resized = imageops::resize(rgb, side, side, FilterType::Triangle);
            &resized
        };
        let pixels = Array3::from_shape_fn((3, IMAGE_SIDE, IMAGE_SIDE), |(c, y, x)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::new(image_id, pixels, domain, unified_label)
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn to_rgb8(&self) -> RgbImage {
        chw_to_rgb8(&self.pixels)
    }
}

/// Decodes and resizes the image behind a manifest entry.
pub fn load_image(entry: &ManifestEntry) -> Result<CellImage> {
    let decoded = image::open(&entry.path).map_err(|e| Error::Decode {
        image_id: entry.image_id.clone(),
        reason: e.to_string(),
    })?;
    CellImage::from_rgb8(
        entry.image_id.clone(),
        &decoded.to_rgb8(),
        entry.domain,
        entry.unified_label.clone(),
    )
}

pub(crate) fn chw_to_rgb8(pixels: &Array3<f32>) -> RgbImage {
    let (_, h, w) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Bilinear resize of a CHW float image. Values are clamped to [0, 1].
pub(crate) fn resize_chw(pixels: &Array3<f32>, height: usize, width: usize) -> Array3<f32> {
    let (c, h, w) = pixels.dim();
    if (h, w) == (height, width) {
        return pixels.clone();
    }
    let mut out = Array3::zeros((c, height, width));
    for ch in 0..c {
        let plane: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([pixels[[ch, y as usize, x as usize]]]));
        let resized = imageops::resize(&plane, width as u32, height as u32, FilterType::Triangle);
        for (x, y, p) in resized.enumerate_pixels() {
            out[[ch, y as usize, x as usize]] = p[0];
        }
    }
    out
}

/// Bilinear resize of a single-channel plane.
pub(crate) fn resize_plane(plane: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = plane.dim();
    let chw = plane.clone().into_shape_with_order((1, h, w)).expect("reshape plane");
    let out = resize_chw(&chw, height, width);
    out.into_shape_with_order((height, width)).expect("reshape plane")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry_for(path: &std::path::Path) -> ManifestEntry {
        ManifestEntry {
            image_id: "matek19/EOS/x.png".into(),
            path: path.to_string_lossy().to_string(),
            domain: DomainId::Matek19,
            raw_label: "EOS".into(),
            unified_label: UnifiedClass::new("eosinophil"),
        }
    }

    #[test]
    fn matek_sized_image_is_resized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        RgbImage::from_fn(400, 400, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 77]))
            .save(&path)
            .unwrap();
        let img = load_image(&entry_for(&path)).unwrap();
        assert_eq!(img.pixels().dim(), (3, 224, 224));
    }

    #[test]
    fn native_size_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let src = RgbImage::from_fn(224, 224, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 3]));
        src.save(&path).unwrap();
        let img = load_image(&entry_for(&path)).unwrap();
        assert_eq!(img.to_rgb8(), src);
    }

    #[test]
    fn white_is_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        RgbImage::from_pixel(360, 363, Rgb([255, 255, 255])).save(&path).unwrap();
        let img = load_image(&entry_for(&path)).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn undecodable_file_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, b"not an image").unwrap();
        let err = load_image(&entry_for(&path)).unwrap_err();
        assert!(err.to_string().contains("matek19/EOS/x.png"));
    }
}
