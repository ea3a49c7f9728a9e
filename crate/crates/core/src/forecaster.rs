//! One-layer LSTM forecaster with a dense readout.
//!
//! The model maps a `w × input_width` window (sensors plus one-hot
//! covariates) to the next-step sensor vector. Training minimises the mean
//! squared L2 error with backpropagation through time and Adam.
//!
//! Parameters live in one flat buffer laid out as
//! `[W (4H × (I+H)) | b (4H) | W_out (d × H) | b_out (d)]`, gate blocks in
//! the order input, forget, cell, output. The flat layout keeps Adam and the
//! finite-difference check trivial.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_row, AssetFrame, Scaling, WindowedDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyperparameters recorded alongside a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub window: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 120,
            hidden: 32,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 64,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Lstm<T> {
    pub input_width: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub params: Vec<T>,
    pub config: TrainConfig,
    /// Sensor scaling the model was trained under.
    pub scaling: Option<Scaling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-pair squared error for each epoch run.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

/// Per-step activations kept for the backward pass.
struct Step<T> {
    xh: Vec<T>,
    gates: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Lstm<T> {
    /// Randomly initialised model: weights uniform in ±1/√hidden, biases zero
    /// except the forget gate, which starts at one.
    pub fn init(input_width: usize, hidden: usize, outputs: usize, seed: u64) -> Result<Self> {
        if input_width == 0 || hidden == 0 || outputs == 0 {
            return Err(Error::arg(format!(
                "model dimensions must be positive (input {input_width}, hidden {hidden}, outputs {outputs})"
            )));
        }
        let mut model = Lstm {
            input_width,
            hidden,
            outputs,
            params: Vec::new(),
            config: TrainConfig {
                hidden,
                seed,
                ..TrainConfig::default()
            },
            scaling: None,
        };
        let n = model.n_params();
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.params = (0..n)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        let (gb, ob) = (model.gate_bias(), model.out_bias());
        for (j, v) in model.params[gb].iter_mut().enumerate() {
            *v = if (hidden..2 * hidden).contains(&j) {
                T::one()
            } else {
                T::zero()
            };
        }
        for v in &mut model.params[ob] {
            *v = T::zero();
        }
        Ok(model)
    }

    fn concat(&self) -> usize {
        self.input_width + self.hidden
    }

    pub fn n_params(&self) -> usize {
        let g = 4 * self.hidden;
        g * self.concat() + g + self.outputs * self.hidden + self.outputs
    }

    fn gate_weights(&self) -> Range<usize> {
        0..4 * self.hidden * self.concat()
    }

    fn gate_bias(&self) -> Range<usize> {
        let s = self.gate_weights().end;
        s..s + 4 * self.hidden
    }

    fn out_weights(&self) -> Range<usize> {
        let s = self.gate_bias().end;
        s..s + self.outputs * self.hidden
    }

    fn out_bias(&self) -> Range<usize> {
        let s = self.out_weights().end;
        s..s + self.outputs
    }

    fn check_window(&self, window: &[T]) -> Result<usize> {
        if window.is_empty() || window.len() % self.input_width != 0 {
            return Err(Error::arg(format!(
                "window of {} values does not match input width {}",
                window.len(),
                self.input_width
            )));
        }
        Ok(window.len() / self.input_width)
    }

    fn run(&self, window: &[T], steps: usize, keep: bool) -> (Vec<T>, Vec<T>, Vec<Step<T>>) {
        let (h_n, i_n, cat) = (self.hidden, self.input_width, self.concat());
        let w = &self.params[self.gate_weights()];
        let b = &self.params[self.gate_bias()];
        let mut h = vec![T::zero(); h_n];
        let mut c = vec![T::zero(); h_n];
        let mut cache = Vec::with_capacity(if keep { steps } else { 0 });
        let mut xh = vec![T::zero(); cat];
        let mut gates = vec![T::zero(); 4 * h_n];
        for t in 0..steps {
            xh[..i_n].copy_from_slice(&window[t * i_n..(t + 1) * i_n]);
            xh[i_n..].copy_from_slice(&h);
            for (r, g) in gates.iter_mut().enumerate() {
                let row = &w[r * cat..(r + 1) * cat];
                let mut acc = b[r];
                for (wv, xv) in row.iter().zip(&xh) {
                    acc += *wv * *xv;
                }
                *g = acc;
            }
            for j in 0..h_n {
                gates[j] = sigmoid(gates[j]);
                gates[h_n + j] = sigmoid(gates[h_n + j]);
                gates[2 * h_n + j] = gates[2 * h_n + j].tanh();
                gates[3 * h_n + j] = sigmoid(gates[3 * h_n + j]);
            }
            let c_prev = if keep { c.clone() } else { Vec::new() };
            let mut tanh_c = vec![T::zero(); h_n];
            for j in 0..h_n {
                c[j] = gates[h_n + j] * c[j] + gates[j] * gates[2 * h_n + j];
                tanh_c[j] = c[j].tanh();
                h[j] = gates[3 * h_n + j] * tanh_c[j];
            }
            if keep {
                cache.push(Step {
                    xh: xh.clone(),
                    gates: gates.clone(),
                    c_prev,
                    tanh_c,
                });
            }
        }
        let wo = &self.params[self.out_weights()];
        let bo = &self.params[self.out_bias()];
        let y = (0..self.outputs)
            .map(|k| {
                let mut acc = bo[k];
                for j in 0..h_n {
                    acc += wo[k * h_n + j] * h[j];
                }
                acc
            })
            .collect();
        (y, h, cache)
    }

    /// Next-step prediction for a row-major `w × input_width` window, run
    /// from a zero initial state.
    pub fn forward(&self, window: &[T]) -> Result<Vec<T>> {
        let steps = self.check_window(window)?;
        Ok(self.run(window, steps, false).0)
    }

    /// Squared L2 loss of one pair and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, window: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
        let steps = self.check_window(window)?;
        if target.len() != self.outputs {
            return Err(Error::arg(format!(
                "target has {} values, model predicts {}",
                target.len(),
                self.outputs
            )));
        }
        let mut grad = vec![T::zero(); self.n_params()];
        let loss = self.accumulate_grad(window, target, steps, &mut grad);
        Ok((loss, grad))
    }

    fn accumulate_grad(&self, window: &[T], target: &[T], steps: usize, grad: &mut [T]) -> T {
        let (h_n, cat) = (self.hidden, self.concat());
        let (y, h_last, cache) = self.run(window, steps, true);
        let dy: Vec<T> = y.iter().zip(target).map(|(&a, &b)| T::two() * (a - b)).collect();
        let loss = y.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();

        let (gw, gb) = (self.gate_weights(), self.gate_bias());
        let (ow, ob) = (self.out_weights(), self.out_bias());
        let wo = &self.params[ow.clone()];
        let mut dh = vec![T::zero(); h_n];
        for k in 0..self.outputs {
            grad[ob.start + k] += dy[k];
            for j in 0..h_n {
                grad[ow.start + k * h_n + j] += dy[k] * h_last[j];
                dh[j] += wo[k * h_n + j] * dy[k];
            }
        }

        let w = &self.params[gw.clone()];
        let mut dc = vec![T::zero(); h_n];
        let mut dz = vec![T::zero(); 4 * h_n];
        for step in cache.iter().rev() {
            let g = &step.gates;
            for j in 0..h_n {
                let (ig, fg, cg, og) = (g[j], g[h_n + j], g[2 * h_n + j], g[3 * h_n + j]);
                let tc = step.tanh_c[j];
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * og * (T::one() - tc * tc);
                dz[j] = dcj * cg * ig * (T::one() - ig);
                dz[h_n + j] = dcj * step.c_prev[j] * fg * (T::one() - fg);
                dz[2 * h_n + j] = dcj * ig * (T::one() - cg * cg);
                dz[3 * h_n + j] = d_o * og * (T::one() - og);
                dc[j] = dcj * fg;
            }
            for v in dh.iter_mut() {
                *v = T::zero();
            }
            for (r, &dzr) in dz.iter().enumerate() {
                grad[gb.start + r] += dzr;
                let row = r * cat;
                let grow = &mut grad[gw.start + row..gw.start + row + cat];
                for (gv, xv) in grow.iter_mut().zip(&step.xh) {
                    *gv += dzr * *xv;
                }
                let wrow = &w[row + self.input_width..row + cat];
                for (dhj, wv) in dh.iter_mut().zip(wrow) {
                    *dhj += dzr * *wv;
                }
            }
        }
        loss
    }

    /// Trains on `data` with mini-batch Adam.
    ///
    /// Each epoch visits the pairs in a seeded shuffled order. Training stops
    /// early once the epoch loss has failed to improve on the best loss by a
    /// relative 1e-4 for `patience` consecutive epochs.
    pub fn train(
        mut self,
        data: &WindowedDataset<T>,
        epochs: usize,
        lr: f64,
        patience: usize,
        seed: u64,
    ) -> Result<(Self, TrainReport)> {
        self.train_in_place(data, epochs, lr, patience, seed)
            .map(|report| (self, report))
    }

    fn train_in_place(
        &mut self,
        data: &WindowedDataset<T>,
        epochs: usize,
        lr: f64,
        patience: usize,
        seed: u64,
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::arg("training dataset is empty"));
        }
        if data.width != self.input_width || data.n_targets != self.outputs {
            return Err(Error::arg(format!(
                "dataset shape {}→{} does not match model {}→{}",
                data.width, data.n_targets, self.input_width, self.outputs
            )));
        }
        self.config.window = data.window;
        self.config.epochs = epochs;
        self.config.learning_rate = lr;
        self.config.patience = patience;
        let batch = self.config.batch_size.max(1);
        let (beta1, beta2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
        let lr_t = T::of(lr);
        let n_params = self.n_params();
        let mut m = vec![T::zero(); n_params];
        let mut v = vec![T::zero(); n_params];
        let mut step = 0i32;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut report = TrainReport {
            losses: Vec::new(),
            epochs_run: 0,
            early_stopped: false,
        };
        let mut best = f64::INFINITY;
        let mut stale = 0;

        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            for chunk in order.chunks(batch) {
                let model = &*self;
                let results: Vec<(T, Vec<T>)> = chunk
                    .par_iter()
                    .map(|&i| {
                        let mut g = vec![T::zero(); n_params];
                        let l = model.accumulate_grad(
                            data.input(i),
                            data.target(i),
                            data.window,
                            &mut g,
                        );
                        (l, g)
                    })
                    .collect();
                let mut grad = vec![T::zero(); n_params];
                for (l, g) in &results {
                    epoch_loss += l.to_f64_lossy();
                    for (acc, gv) in grad.iter_mut().zip(g) {
                        *acc += *gv;
                    }
                }
                let scale = T::one() / T::of_usize(chunk.len());
                step += 1;
                let bc1 = T::one() - beta1.powi(step);
                let bc2 = T::one() - beta2.powi(step);
                for ((p, g), (mi, vi)) in self
                    .params
                    .iter_mut()
                    .zip(&grad)
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    let g = *g * scale;
                    *mi = beta1 * *mi + (T::one() - beta1) * g;
                    *vi = beta2 * *vi + (T::one() - beta2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *p -= lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
            let mean_loss = epoch_loss / data.len() as f64;
            if !mean_loss.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            report.losses.push(mean_loss);
            report.epochs_run = epoch + 1;
            if mean_loss < best * (1.0 - 1e-4) {
                best = mean_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience.max(1) {
                    report.early_stopped = epoch + 1 < epochs;
                    break;
                }
            }
        }
        Ok(report)
    }

    /// Mean per-pair squared error over a dataset.
    pub fn evaluate(&self, data: &WindowedDataset<T>) -> Result<f64> {
        let losses: Vec<f64> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let y = self.run(data.input(i), data.window, false).0;
                y.iter()
                    .zip(data.target(i))
                    .map(|(&a, &b)| ((a - b) * (a - b)).to_f64_lossy())
                    .sum()
            })
            .collect();
        Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
    }

    /// One-step-ahead predictions for every target in `range`.
    ///
    /// The prediction for frame row `t` reads only rows `t − w .. t − 1`.
    pub fn predict_series(&self, frame: &AssetFrame, range: Range<usize>) -> Result<Predictions<T>> {
        let w = self.config.window;
        if w == 0 || range.len() <= w || range.end > frame.len() {
            return Err(Error::arg(format!(
                "prediction range {range:?} must be longer than the window {w} and inside the frame"
            )));
        }
        let width = frame.input_width()?;
        if width != self.input_width {
            return Err(Error::arg(format!(
                "frame input width {width} does not match model input width {}",
                self.input_width
            )));
        }
        let mut rows = Vec::with_capacity(range.len() * width);
        for t in range.clone() {
            encode_row::<T>(frame, t, &mut rows);
        }
        let n = range.len() - w;
        let outputs: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| self.run(&rows[i * width..(i + w) * width], w, false).0)
            .collect();
        let values = (0..self.outputs)
            .map(|k| outputs.iter().map(|y| y[k]).collect())
            .collect();
        Ok(Predictions {
            indices: (range.start + w..range.end).collect(),
            values,
        })
    }

    /// Largest relative disagreement between the analytic gradient and
    /// central finite differences, `|g_a − g_n| / max(|g_a| + |g_n|, 1e-8)`.
    pub fn gradient_check(&self, window: &[T], target: &[T], epsilon: T) -> Result<T> {
        if !(epsilon > T::zero() && epsilon <= T::of(1e-2)) {
            return Err(Error::arg(format!("epsilon {epsilon} outside (0, 1e-2]")));
        }
        let (_, analytic) = self.loss_and_grad(window, target)?;
        let loss = |m: &Lstm<T>| -> Result<T> {
            let y = m.forward(window)?;
            Ok(y.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum())
        };
        let mut probe = self.clone();
        let mut worst = T::zero();
        for p in 0..self.n_params() {
            let orig = probe.params[p];
            probe.params[p] = orig + epsilon;
            let up = loss(&probe)?;
            probe.params[p] = orig - epsilon;
            let down = loss(&probe)?;
            probe.params[p] = orig;
            let numeric = (up - down) / (T::two() * epsilon);
            let a = analytic[p];
            let denom = (a.abs() + numeric.abs()).max(T::of(1e-8));
            worst = worst.max((a - numeric).abs() / denom);
        }
        Ok(worst)
    }
}

/// Forecasts aligned to frame rows: `values[k][i]` predicts sensor `k` at
/// frame row `indices[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T> {
    pub indices: Vec<usize>,
    pub values: Vec<Vec<T>>,
}
