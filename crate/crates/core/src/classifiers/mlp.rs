//! Fully connected network with ReLU hidden layers and a softmax output,
//! trained by minibatch Adam on cross-entropy plus an L2 penalty.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden_layer_sizes: Vec<usize>,
    pub activation: String,
    pub solver: String,
    pub learning_rate_init: f64,
    /// L2 penalty weight.
    pub alpha: f64,
    /// `None` means `min(200, n_samples)`.
    pub batch_size: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub n_iter_no_change: usize,
    pub beta_1: f64,
    pub beta_2: f64,
    pub epsilon: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden_layer_sizes: vec![100],
            activation: "relu".into(),
            solver: "adam".into(),
            learning_rate_init: 1e-3,
            alpha: 1e-4,
            batch_size: None,
            max_iter: 200,
            tol: 1e-4,
            n_iter_no_change: 10,
            beta_1: 0.9,
            beta_2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl MlpParams {
    pub(super) fn validate(&self) -> Result<()> {
        if self.activation != "relu" || self.solver != "adam" {
            return Err(Error::InvalidArgument(format!(
                "mlp supports activation=relu and solver=adam, got {} / {}",
                self.activation, self.solver
            )));
        }
        if self.hidden_layer_sizes.contains(&0) || self.max_iter == 0 || !(self.learning_rate_init > 0.0) {
            return Err(Error::InvalidArgument("mlp needs positive layer sizes, iterations and learning rate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    pub n_iter: usize,
    pub final_loss: f64,
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

impl Mlp {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.weights.iter().map(|w| w.nrows()).collect();
        out.extend(self.weights.last().map(|w| w.ncols()));
        out
    }

    /// Activations of every layer, input first; the last is the softmax output.
    fn forward(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.to_owned()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(w) + b;
            if l == last {
                softmax_rows(&mut z);
            } else {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn fit(params: &MlpParams, x: ArrayView2<f64>, y: &[usize], k: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        let n = x.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![x.ncols()];
        sizes.extend(&params.hidden_layer_sizes);
        sizes.push(k);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let bound = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((pair[0], pair[1]), || rng.random_range(-bound..bound)));
            biases.push(Array1::from_shape_simple_fn(pair[1], || rng.random_range(-bound..bound)));
        }
        let mut net = Mlp {
            weights,
            biases,
            n_iter: 0,
            final_loss: f64::INFINITY,
        };
        let mut onehot = Array2::<f64>::zeros((n, k));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let batch = params.batch_size.unwrap_or(200).clamp(1, n);
        let layers = net.weights.len();
        let mut m_w: Vec<Array2<f64>> = net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
        let mut v_w = m_w.clone();
        let mut m_b: Vec<Array1<f64>> = net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
        let mut v_b = m_b.clone();
        let mut t = 0i32;
        let mut best_loss = f64::INFINITY;
        let mut no_improve = 0;
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..params.max_iter {
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(batch) {
                let xb = x.select(Axis(0), chunk);
                let yb = onehot.select(Axis(0), chunk);
                let bs = chunk.len() as f64;
                let acts = net.forward(xb.view());
                let out = &acts[layers];
                let ce: f64 = -out
                    .iter()
                    .zip(yb.iter())
                    .filter(|(_, t)| **t > 0.0)
                    .map(|(p, _)| p.max(1e-10).ln())
                    .sum::<f64>()
                    / bs;
                let l2: f64 = net.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum();
                loss_sum += (ce + 0.5 * params.alpha * l2 / bs) * bs;

                let mut delta = (out - &yb) / bs;
                t += 1;
                let lr = params.learning_rate_init * (1.0 - params.beta_2.powi(t)).sqrt()
                    / (1.0 - params.beta_1.powi(t));
                for l in (0..layers).rev() {
                    let gw = acts[l].t().dot(&delta) + &(&net.weights[l] * (params.alpha / bs));
                    let gb = delta.sum_axis(Axis(0));
                    if l > 0 {
                        let mut back = delta.dot(&net.weights[l].t());
                        back.zip_mut_with(&acts[l], |d, a| {
                            if *a <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        delta = back;
                    }
                    adam(&mut net.weights[l], &mut m_w[l], &mut v_w[l], &gw, params, lr);
                    adam(&mut net.biases[l], &mut m_b[l], &mut v_b[l], &gb, params, lr);
                }
            }
            let loss = loss_sum / n as f64;
            net.n_iter = epoch + 1;
            net.final_loss = loss;
            if loss > best_loss - params.tol {
                no_improve += 1;
            } else {
                no_improve = 0;
            }
            best_loss = best_loss.min(loss);
            if no_improve > params.n_iter_no_change {
                break;
            }
        }
        Ok(net)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let acts = self.forward(x);
        acts[self.weights.len()]
            .rows()
            .into_iter()
            .map(|r| super::argmax(r.as_slice().expect("contiguous row")))
            .collect()
    }
}

fn adam<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    params: &MlpParams,
    lr: f64,
) {
    let (b1, b2, eps) = (params.beta_1, params.beta_2, params.epsilon);
    ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, g| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * *m / (v.sqrt() + eps);
    });
}
