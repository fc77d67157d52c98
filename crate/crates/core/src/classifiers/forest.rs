use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Split thresholds closer than this are treated as the same value.
const FEATURE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub criterion: String,
    /// Features considered per split: `sqrt` of the feature count.
    pub max_features: String,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_estimators: 200,
            max_depth: 16,
            criterion: "gini".into(),
            max_features: "sqrt".into(),
            bootstrap: true,
            min_samples_split: 2,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) enum Node {
    Leaf {
        probs: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct Tree {
    pub nodes: Vec<Node>,
    pub depth: usize,
}

impl Tree {
    fn leaf_probs(&self, row: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { probs } => return probs,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct Forest {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    k: usize,
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
    depth: usize,
}

impl Builder<'_> {
    fn counts(&self, samples: &[(usize, f64)]) -> Vec<f64> {
        let mut c = vec![0.0; self.k];
        for &(i, w) in samples {
            c[self.y[i]] += w;
        }
        c
    }

    fn leaf(&mut self, counts: &[f64]) -> usize {
        let total: f64 = counts.iter().sum();
        self.nodes.push(Node::Leaf {
            probs: counts.iter().map(|c| c / total).collect(),
        });
        self.nodes.len() - 1
    }

    /// Best split as (feature, threshold, left count) after sorting `samples` by that feature.
    fn best_split(&self, samples: &mut [(usize, f64)], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let d = self.x.ncols();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(rng);
        let total = self.counts(samples);
        let w_total: f64 = total.iter().sum();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut visited = 0;
        let mut values: Vec<(f64, usize, f64)> = Vec::with_capacity(samples.len());
        for f in features {
            if visited >= self.mtry {
                break;
            }
            values.clear();
            values.extend(samples.iter().map(|&(i, w)| (self.x[[i, f]], i, w)));
            values.sort_by(|a, b| a.0.total_cmp(&b.0));
            if values[values.len() - 1].0 <= values[0].0 + FEATURE_EPS {
                continue;
            }
            visited += 1;
            let mut left = vec![0.0; self.k];
            let mut w_left = 0.0;
            for j in 0..values.len() - 1 {
                let (v, i, w) = values[j];
                left[self.y[i]] += w;
                w_left += w;
                let next = values[j + 1].0;
                if next <= v + FEATURE_EPS {
                    continue;
                }
                let w_right = w_total - w_left;
                // Maximizing this is minimizing the weighted child gini.
                let score = left.iter().map(|c| c * c).sum::<f64>() / w_left
                    + left
                        .iter()
                        .zip(&total)
                        .map(|(l, t)| (t - l) * (t - l))
                        .sum::<f64>()
                        / w_right;
                if best.is_none_or(|(s, _, _)| score > s) {
                    let mut threshold = 0.5 * (v + next);
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, samples: &mut [(usize, f64)], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        self.depth = self.depth.max(depth);
        let counts = self.counts(samples);
        let pure = counts.iter().filter(|c| **c > 0.0).count() <= 1;
        if pure || depth >= self.params.max_depth || samples.len() < self.params.min_samples_split {
            return self.leaf(&counts);
        }
        let Some((feature, threshold)) = self.best_split(samples, rng) else {
            return self.leaf(&counts);
        };
        let mut left: Vec<(usize, f64)> = Vec::new();
        let mut right: Vec<(usize, f64)> = Vec::new();
        for &s in samples.iter() {
            if self.x[[s.0, feature]] <= threshold {
                left.push(s);
            } else {
                right.push(s);
            }
        }
        if left.len() < self.params.min_samples_leaf || right.len() < self.params.min_samples_leaf {
            return self.leaf(&counts);
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { probs: Vec::new() });
        let l = self.grow(&mut left, depth + 1, rng);
        let r = self.grow(&mut right, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        at
    }
}

impl Forest {
    pub fn fit(params: &ForestParams, x: ArrayView2<f64>, y: &[usize], k: usize, seed: u64) -> Result<Self> {
        if params.criterion != "gini" || params.max_features != "sqrt" {
            return Err(Error::InvalidArgument(format!(
                "forest supports criterion=gini and max_features=sqrt, got {} / {}",
                params.criterion, params.max_features
            )));
        }
        let n = x.nrows();
        let mtry = ((x.ncols() as f64).sqrt().floor() as usize).max(1);
        let trees = (0..params.n_estimators)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut samples: Vec<(usize, f64)> = if params.bootstrap {
                    let mut counts = vec![0u32; n];
                    for _ in 0..n {
                        counts[rng.random_range(0..n)] += 1;
                    }
                    counts
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| **c > 0)
                        .map(|(i, c)| (i, *c as f64))
                        .collect()
                } else {
                    (0..n).map(|i| (i, 1.0)).collect()
                };
                let mut b = Builder {
                    x: x.view(),
                    y,
                    k,
                    params,
                    mtry,
                    nodes: Vec::new(),
                    depth: 0,
                };
                b.grow(&mut samples, 0, &mut rng);
                Tree {
                    nodes: b.nodes,
                    depth: b.depth,
                }
            })
            .collect();
        Ok(Forest { trees, n_classes: k })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let mut acc = vec![0.0; self.n_classes];
                for t in &self.trees {
                    for (a, p) in acc.iter_mut().zip(t.leaf_probs(&row)) {
                        *a += p;
                    }
                }
                super::argmax(&acc)
            })
            .collect()
    }

    pub fn max_depth_reached(&self) -> usize {
        self.trees.iter().map(|t| t.depth).max().unwrap_or(0)
    }
}
