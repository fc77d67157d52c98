#![allow(dead_code)]

use bcsam_core::autoencoder::{FeatureRow, FeatureTable, LATENT_DIM};
use bcsam_core::dataset::{DomainId, UnifiedClass};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` points in `LATENT_DIM` dims from `classes` gaussian blobs with unit
/// noise and centers `sep` apart along distinct axes.
pub fn blobs(n: usize, classes: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<UnifiedClass>) {
    noisy_blobs(n, classes, sep, 1.0, seed)
}

pub fn noisy_blobs(n: usize, classes: usize, sep: f64, noise: f64, seed: u64) -> (Array2<f64>, Vec<UnifiedClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, LATENT_DIM));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..LATENT_DIM {
            let v: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = noise * v + if j == c { sep } else { 0.0 };
        }
        y.push(UnifiedClass::new(format!("class{c:02}")));
    }
    (x, y)
}

pub fn table(domain: DomainId, x: &Array2<f64>, y: &[UnifiedClass]) -> FeatureTable {
    let rows = (0..x.nrows())
        .map(|i| FeatureRow {
            image_id: format!("{}/{}/{i:05}.png", domain.as_str(), y[i]),
            domain,
            label: y[i].clone(),
            z: x.row(i).iter().map(|v| *v as f32).collect(),
        })
        .collect();
    FeatureTable::new(rows).unwrap()
}

pub fn random_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<UnifiedClass> {
    (0..n)
        .map(|_| UnifiedClass::new(format!("class{:02}", rng.random_range(0..classes))))
        .collect()
}
