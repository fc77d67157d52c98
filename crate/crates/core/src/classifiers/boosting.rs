//! Histogram gradient-boosted trees with a softmax objective: each round
//! grows one depth-wise regression tree per class on the second-order
//! gradient statistics.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub reg_lambda: f64,
    pub reg_alpha: f64,
    /// Minimum loss reduction for a split.
    pub gamma: f64,
    pub min_child_weight: f64,
    pub max_bin: usize,
    pub base_score: f64,
    pub objective: String,
    pub tree_method: String,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_estimators: 100,
            learning_rate: 0.3,
            max_depth: 6,
            reg_lambda: 1.0,
            reg_alpha: 0.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            max_bin: 256,
            base_score: 0.5,
            objective: "multi:softprob".into(),
            tree_method: "hist".into(),
        }
    }
}

impl BoostParams {
    pub(super) fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 || self.max_bin < 2 || !(self.learning_rate > 0.0) || self.reg_lambda < 0.0 {
            return Err(Error::InvalidArgument("boosting needs rounds > 0, max_bin >= 2, eta > 0, lambda >= 0".into()));
        }
        if self.reg_alpha != 0.0 {
            return Err(Error::InvalidArgument("L1 leaf regularization is not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct RegTree {
    nodes: Vec<Node>,
    depth: usize,
}

impl RegTree {
    fn value(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
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
pub(super) struct Booster {
    base_score: f64,
    n_classes: usize,
    /// One tree per class per round.
    pub rounds: Vec<Vec<RegTree>>,
}

/// Per-feature upper bin edges: bin `b` holds values `<= cuts[b]`.
fn quantile_cuts(x: ArrayView2<f64>, max_bin: usize) -> Vec<Vec<f64>> {
    (0..x.ncols())
        .map(|f| {
            let mut v: Vec<f64> = x.column(f).to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            if v.len() <= max_bin {
                return v;
            }
            let mut cuts: Vec<f64> = (1..=max_bin)
                .map(|b| v[((b * v.len()) / max_bin).min(v.len()) - 1])
                .collect();
            cuts.dedup();
            cuts
        })
        .collect()
}

struct Grower<'a> {
    bins: &'a [Vec<u16>],
    cuts: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    p: &'a BoostParams,
    nodes: Vec<Node>,
    depth: usize,
}

impl Grower<'_> {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.p.reg_lambda)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        self.depth = self.depth.max(depth);
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let leaf = |s: &mut Self| {
            s.nodes.push(Node::Leaf(-g / (h + s.p.reg_lambda) * s.p.learning_rate));
            s.nodes.len() - 1
        };
        if depth >= self.p.max_depth || rows.len() < 2 {
            return leaf(self);
        }
        let parent = self.score(g, h);
        let best = (0..self.cuts.len())
            .map(|f| {
                let nb = self.cuts[f].len();
                let mut hg = vec![0.0; nb];
                let mut hh = vec![0.0; nb];
                for &i in &rows {
                    let b = self.bins[f][i] as usize;
                    hg[b] += self.grad[i];
                    hh[b] += self.hess[i];
                }
                let (mut gl, mut hl) = (0.0, 0.0);
                let mut best: Option<(f64, usize, usize)> = None;
                for b in 0..nb.saturating_sub(1) {
                    gl += hg[b];
                    hl += hh[b];
                    let (gr, hr) = (g - gl, h - hl);
                    if hl < self.p.min_child_weight || hr < self.p.min_child_weight {
                        continue;
                    }
                    let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent) - self.p.gamma;
                    if gain > 1e-6 && best.is_none_or(|(bg, _, _)| gain > bg) {
                        best = Some((gain, f, b));
                    }
                }
                best
            })
            .fold(None, |acc: Option<(f64, usize, usize)>, cand| match (acc, cand) {
                (Some(a), Some(c)) if c.0 > a.0 => Some(c),
                (None, c) => c,
                (a, _) => a,
            });
        let Some((_, feature, bin)) = best else {
            return leaf(self);
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.bins[feature][i] as usize <= bin);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(0.0));
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[at] = Node::Split {
            feature,
            threshold: self.cuts[feature][bin],
            left: l,
            right: r,
        };
        at
    }
}

impl Booster {
    pub fn fit(params: &BoostParams, x: ArrayView2<f64>, y: &[usize], k: usize) -> Result<Self> {
        params.validate()?;
        let n = x.nrows();
        let cuts = quantile_cuts(x, params.max_bin);
        let bins: Vec<Vec<u16>> = (0..x.ncols())
            .map(|f| {
                x.column(f)
                    .iter()
                    .map(|v| cuts[f].partition_point(|c| c < v).min(cuts[f].len() - 1) as u16)
                    .collect()
            })
            .collect();
        let mut margin = vec![params.base_score; n * k];
        let mut rounds = Vec::with_capacity(params.n_estimators);
        for _ in 0..params.n_estimators {
            let mut prob = margin.clone();
            for row in prob.chunks_mut(k) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let trees: Vec<RegTree> = (0..k)
                .into_par_iter()
                .map(|c| {
                    let grad: Vec<f64> = (0..n).map(|i| prob[i * k + c] - (y[i] == c) as u8 as f64).collect();
                    let hess: Vec<f64> = (0..n)
                        .map(|i| (2.0 * prob[i * k + c] * (1.0 - prob[i * k + c])).max(1e-16))
                        .collect();
                    let mut gr = Grower {
                        bins: &bins,
                        cuts: &cuts,
                        grad: &grad,
                        hess: &hess,
                        p: params,
                        nodes: Vec::new(),
                        depth: 0,
                    };
                    gr.grow((0..n).collect(), 0);
                    RegTree {
                        nodes: gr.nodes,
                        depth: gr.depth,
                    }
                })
                .collect();
            for (i, row) in x.rows().into_iter().enumerate() {
                let row = row.to_vec();
                for (c, t) in trees.iter().enumerate() {
                    margin[i * k + c] += t.value(&row);
                }
            }
            rounds.push(trees);
        }
        Ok(Booster {
            base_score: params.base_score,
            n_classes: k,
            rounds,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        x.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let mut m = vec![self.base_score; self.n_classes];
                for trees in &self.rounds {
                    for (c, t) in trees.iter().enumerate() {
                        m[c] += t.value(&row);
                    }
                }
                super::argmax(&m)
            })
            .collect()
    }

    pub fn max_depth_reached(&self) -> usize {
        self.rounds.iter().flatten().map(|t| t.depth).max().unwrap_or(0)
    }
}
