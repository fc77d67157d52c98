//! C-SVC trained one-vs-one with an SMO solver (second-order working-set
//! selection, no shrinking). Prediction is a majority vote over class pairs.

use std::collections::{BTreeMap, VecDeque};

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const TAU: f64 = 1e-12;
/// Cap on the cached kernel rows per binary problem, in f64 entries.
const CACHE_ENTRIES: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Rbf,
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// `1 / (n_features · var(X))`, with var over every entry of the training matrix.
    Scale,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub kernel: Kernel,
    pub c: f64,
    pub gamma: Gamma,
    pub degree: u32,
    pub coef0: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub decision: String,
}

impl SvmParams {
    pub fn rbf() -> Self {
        SvmParams {
            kernel: Kernel::Rbf,
            c: 1.0,
            gamma: Gamma::Scale,
            degree: 3,
            coef0: 0.0,
            tol: 1e-3,
            max_iter: 10_000_000,
            decision: "ovo_vote".into(),
        }
    }

    pub fn poly() -> Self {
        SvmParams {
            kernel: Kernel::Poly,
            ..Self::rbf()
        }
    }

    pub(super) fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument(format!(
                "svm needs C > 0, tol > 0 and max_iter > 0, got {} / {} / {}",
                self.c, self.tol, self.max_iter
            )));
        }
        if let Gamma::Value(g) = self.gamma {
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!("svm gamma {g} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct KernelFn {
    kernel: Kernel,
    gamma: f64,
    degree: u32,
    coef0: f64,
}

impl KernelFn {
    fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self.kernel {
            Kernel::Rbf => {
                let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                (-self.gamma * d2).exp()
            }
            Kernel::Poly => (self.gamma * a.dot(&b) + self.coef0).powi(self.degree as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct PairModel {
    pub pos: usize,
    pub neg: usize,
    /// (index into `support`, alpha · y)
    pub coef: Vec<(usize, f64)>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct SvmModel {
    kernel: KernelFn,
    pub gamma: f64,
    pub support: Vec<Vec<f64>>,
    pub pairs: Vec<PairModel>,
    n_classes: usize,
}

/// Kernel rows computed on demand and kept FIFO up to a budget.
struct RowCache<'a, 'x> {
    x: &'a [ArrayView1<'x, f64>],
    y: &'a [f64],
    k: KernelFn,
    rows: BTreeMap<usize, Vec<f64>>,
    order: VecDeque<usize>,
    limit: usize,
}

impl RowCache<'_, '_> {
    /// Row of `Q_ij = y_i y_j K(x_i, x_j)`.
    fn row(&mut self, i: usize) -> &[f64] {
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.limit {
                if let Some(old) = self.order.pop_front() {
                    self.rows.remove(&old);
                }
            }
            let xi = self.x[i];
            let yi = self.y[i];
            let r = self
                .x
                .iter()
                .zip(self.y)
                .map(|(xj, yj)| yi * yj * self.k.eval(xi, *xj))
                .collect();
            self.rows.insert(i, r);
            self.order.push_back(i);
        }
        &self.rows[&i]
    }
}

/// Dual solution of one binary problem: `(alpha, rho)`.
fn solve_binary(x: &[ArrayView1<f64>], y: &[f64], k: KernelFn, c: f64, eps: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let l = y.len();
    let qd: Vec<f64> = x.iter().map(|xi| k.eval(*xi, *xi)).collect();
    let mut cache = RowCache {
        x,
        y,
        k,
        rows: BTreeMap::new(),
        order: VecDeque::new(),
        limit: (CACHE_ENTRIES / l.max(1)).max(2),
    };
    let mut alpha = vec![0.0; l];
    let mut g = vec![-1.0; l];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..l {
            if y[t] > 0.0 {
                if !upper(alpha[t]) && -g[t] >= gmax {
                    gmax = -g[t];
                    i = t;
                }
            } else if !lower(alpha[t]) && g[t] >= gmax {
                gmax = g[t];
                i = t;
            }
        }
        if i == usize::MAX {
            break;
        }
        let qi = cache.row(i).to_vec();
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut obj_min = f64::INFINITY;
        for t in 0..l {
            if y[t] > 0.0 {
                if !lower(alpha[t]) {
                    let grad_diff = gmax + g[t];
                    gmax2 = gmax2.max(g[t]);
                    if grad_diff > 0.0 {
                        let mut quad = qd[i] + qd[t] - 2.0 * y[i] * qi[t];
                        if quad <= 0.0 {
                            quad = TAU;
                        }
                        let obj = -(grad_diff * grad_diff) / quad;
                        if obj <= obj_min {
                            obj_min = obj;
                            j = t;
                        }
                    }
                }
            } else if !upper(alpha[t]) {
                let grad_diff = gmax - g[t];
                gmax2 = gmax2.max(-g[t]);
                if grad_diff > 0.0 {
                    let mut quad = qd[i] + qd[t] + 2.0 * y[i] * qi[t];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(grad_diff * grad_diff) / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j = t;
                    }
                }
            }
        }
        if gmax + gmax2 < eps || j == usize::MAX {
            break;
        }
        let qj = cache.row(j).to_vec();
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (old_ai, old_aj);
        if y[i] != y[j] {
            let mut quad = qd[i] + qd[j] + 2.0 * qi[j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = qd[i] + qd[j] - 2.0 * qi[j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (dai, daj) = (ai - old_ai, aj - old_aj);
        for t in 0..l {
            g[t] += qi[t] * dai + qj[t] * daj;
        }
    }
    if iter >= max_iter {
        log::warn!("svm solver hit max_iter={max_iter} before converging");
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..l {
        let yg = y[t] * g[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { 0.5 * (ub + lb) };
    (alpha, rho)
}

impl SvmModel {
    pub fn fit(params: &SvmParams, x: ArrayView2<f64>, y: &[usize], k: usize) -> Result<Self> {
        params.validate()?;
        let gamma = match params.gamma {
            Gamma::Value(g) => g,
            Gamma::Scale => {
                let n = x.len() as f64;
                let mean = x.sum() / n;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    1.0 / (x.ncols() as f64 * var)
                } else {
                    1.0
                }
            }
        };
        let kernel = KernelFn {
            kernel: params.kernel,
            gamma,
            degree: params.degree,
            coef0: params.coef0,
        };
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
        let solved: Vec<(usize, usize, Vec<usize>, Vec<f64>, f64)> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == a || y[i] == b).collect();
                let rows: Vec<ArrayView1<f64>> = idx.iter().map(|&i| x.row(i)).collect();
                let signs: Vec<f64> = idx.iter().map(|&i| if y[i] == a { 1.0 } else { -1.0 }).collect();
                if rows.is_empty() {
                    return (a, b, idx, Vec::new(), 0.0);
                }
                let (alpha, rho) = solve_binary(&rows, &signs, kernel, params.c, params.tol, params.max_iter);
                let coef = alpha.iter().zip(&signs).map(|(a, s)| a * s).collect();
                (a, b, idx, coef, rho)
            })
            .collect();

        let mut support_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut support = Vec::new();
        let mut models = Vec::with_capacity(solved.len());
        for (a, b, idx, coef, rho) in solved {
            let mut kept = Vec::new();
            for (&i, &c) in idx.iter().zip(&coef) {
                if c != 0.0 {
                    let s = *support_of.entry(i).or_insert_with(|| {
                        support.push(x.row(i).to_vec());
                        support.len() - 1
                    });
                    kept.push((s, c));
                }
            }
            models.push(PairModel {
                pos: a,
                neg: b,
                coef: kept,
                rho,
            });
        }
        Ok(SvmModel {
            kernel,
            gamma,
            support,
            pairs: models,
            n_classes: k,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let support: Vec<ndarray::Array1<f64>> = self.support.iter().map(|s| ndarray::Array1::from(s.clone())).collect();
        x.rows()
            .into_iter()
            .map(|row| {
                let kv: Vec<f64> = support.iter().map(|s| self.kernel.eval(s.view(), row)).collect();
                let mut votes = vec![0.0; self.n_classes];
                for p in &self.pairs {
                    let f: f64 = p.coef.iter().map(|(s, c)| c * kv[*s]).sum::<f64>() - p.rho;
                    if f > 0.0 {
                        votes[p.pos] += 1.0;
                    } else {
                        votes[p.neg] += 1.0;
                    }
                }
                super::argmax(&votes)
            })
            .collect()
    }
}
