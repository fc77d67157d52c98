//! Two-domain toy corpus: thirteen shape classes drawn on a domain-tinted
//! background, with exact masks. Used for desk-scale end-to-end runs and as
//! a test fixture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DomainId, LabelMap, UnifiedClass};
use crate::{Error, Result};

/// Shape drawn for class index `i`.
pub const SHAPES: [&str; 13] = [
    "disk",
    "ring",
    "square",
    "triangle",
    "cross",
    "ellipse",
    "diamond",
    "two_lobes",
    "three_lobes",
    "star",
    "crescent",
    "hollow_square",
    "bar",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub per_class: usize,
    pub side: u32,
    pub seed: u64,
    /// Std of the per-pixel gaussian noise, in `[0, 1]` units.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            per_class: 10,
            side: 224,
            seed: 0,
            noise: 0.02,
        }
    }
}

/// Where [`write_synthetic_dataset`] put things.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub domain_roots: BTreeMap<DomainId, PathBuf>,
    pub masks_root: PathBuf,
    pub label_map_path: PathBuf,
    pub classes: Vec<UnifiedClass>,
}

/// The unified class names, one per shape.
pub fn synthetic_classes() -> Vec<UnifiedClass> {
    LabelMap::builtin().classes()
}

/// Identity map `class name → class name` for both domains.
pub fn synthetic_label_map() -> LabelMap {
    let per_domain: BTreeMap<String, UnifiedClass> =
        synthetic_classes().into_iter().map(|c| (c.as_str().to_string(), c)).collect();
    let rules = DomainId::ALL.iter().map(|d| (*d, per_domain.clone())).collect();
    LabelMap::new(rules).expect("synthetic label map has 13 classes")
}

fn background(domain: DomainId) -> [f64; 3] {
    match domain {
        DomainId::Matek19 => [0.93, 0.84, 0.88],
        DomainId::Acevedo20 => [0.78, 0.87, 0.95],
    }
}

fn foreground(domain: DomainId) -> [f64; 3] {
    match domain {
        DomainId::Matek19 => [0.55, 0.30, 0.62],
        DomainId::Acevedo20 => [0.40, 0.38, 0.74],
    }
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let near = |cx: f64, cy: f64, rad: f64| (u - cx).powi(2) + (v - cy).powi(2) < rad * rad;
    match shape {
        0 => r < 0.8,
        1 => r > 0.5 && r < 0.85,
        2 => u.abs().max(v.abs()) < 0.65,
        3 => v > -0.6 && v < 0.7 && u.abs() < (0.7 - v) * 0.6,
        4 => (u.abs() < 0.25 && v.abs() < 0.8) || (v.abs() < 0.25 && u.abs() < 0.8),
        5 => (u / 0.9).powi(2) + (v / 0.45).powi(2) < 1.0,
        6 => u.abs() + v.abs() < 0.85,
        7 => near(-0.38, 0.0, 0.4) || near(0.38, 0.0, 0.4),
        8 => (0..3).any(|k| {
            let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
            near(0.42 * a.cos(), 0.42 * a.sin(), 0.36)
        }),
        9 => r < 0.5 + 0.3 * (5.0 * v.atan2(u)).cos(),
        10 => r < 0.8 && !near(0.4, 0.0, 0.6),
        11 => {
            let m = u.abs().max(v.abs());
            m < 0.75 && m > 0.42
        }
        12 => u.abs() < 0.85 && v.abs() < 0.2,
        _ => false,
    }
}

/// Renders one cell of class `class` (index into [`SHAPES`]); `None` draws background only.
pub fn render_cell(class: Option<usize>, domain: DomainId, side: u32, noise: f64, seed: u64) -> (RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let scale = s * rng.random_range(0.22..0.30);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (cx, cy) = (
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
    );
    let bg = background(domain);
    let fg = foreground(domain);
    let shade: f64 = rng.random_range(-0.05..0.05);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid noise std");
    let (sin, cos) = angle.sin_cos();
    let mut mask = GrayImage::new(side, side);
    let mut img = RgbImage::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 + 0.5 - cx) / scale;
            let dy = (y as f64 + 0.5 - cy) / scale;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let on = class.is_some_and(|c| inside(c, u, v));
            let base = if on { fg.map(|c| c + shade) } else { bg };
            let px = base.map(|c| {
                let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                ((c + n).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x, y, Rgb(px));
            mask.put_pixel(x, y, Luma([if on { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

fn save(img: &impl ImageSave, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(path)
}

trait ImageSave {
    fn save_png(&self, path: &Path) -> Result<()>;
}

impl ImageSave for RgbImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

impl ImageSave for GrayImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        self.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Writes `<out>/<domain>/<class>/<nnnn>.png`, matching masks under
/// `<out>/masks/` and the label map at `<out>/label_map.json`.
pub fn write_synthetic_dataset(out: &Path, cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.per_class == 0 || cfg.side < 16 {
        return Err(Error::InvalidArgument("synthetic data needs per_class > 0 and side >= 16".into()));
    }
    let classes = synthetic_classes();
    let masks_root = out.join("masks");
    let mut domain_roots = BTreeMap::new();
    for (d, domain) in DomainId::ALL.iter().enumerate() {
        let root = out.join(domain.as_str());
        for (c, class) in classes.iter().enumerate() {
            for i in 0..cfg.per_class {
                let seed = cfg
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(((d * classes.len() + c) * 100_000 + i) as u64);
                let (img, mask) = render_cell(Some(c), *domain, cfg.side, cfg.noise, seed);
                let rel = Path::new(domain.as_str()).join(class.as_str()).join(format!("{i:04}.png"));
                save(&img, &out.join(&rel))?;
                save(&mask, &masks_root.join(&rel))?;
            }
        }
        domain_roots.insert(*domain, root);
    }
    let label_map_path = out.join("label_map.json");
    synthetic_label_map().save(&label_map_path)?;
    Ok(SyntheticDataset {
        root: out.to_path_buf(),
        domain_roots,
        masks_root,
        label_map_path,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shape_is_visible_and_distinct() {
        let masks: Vec<Vec<u8>> = (0..13)
            .map(|c| {
                let (_, m) = render_cell(Some(c), DomainId::Matek19, 64, 0.0, 5);
                let on = m.pixels().filter(|p| p[0] == 255).count();
                assert!(on > 64 * 64 / 50, "shape {} nearly empty", SHAPES[c]);
                m.into_raw()
            })
            .collect();
        for a in 0..13 {
            for b in a + 1..13 {
                assert_ne!(masks[a], masks[b], "{} vs {}", SHAPES[a], SHAPES[b]);
            }
        }
    }

    #[test]
    fn background_only_has_empty_mask() {
        let (img, m) = render_cell(None, DomainId::Acevedo20, 32, 0.0, 1);
        assert!(m.pixels().all(|p| p[0] == 0));
        assert_eq!(img.get_pixel(0, 0), img.get_pixel(31, 31));
    }

    #[test]
    fn label_map_has_thirteen_classes() {
        assert_eq!(synthetic_label_map().classes().len(), 13);
        assert_eq!(SHAPES.len(), 13);
    }
}
