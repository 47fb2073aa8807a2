//! The segmentation head: an MLP of `Linear -> BatchNorm -> ReLU` blocks followed
//! by a final `Linear`, with an exact backward pass and an AdamW optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl HeadConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::arg(format!(
                "invalid head shape {input_dim} -> {hidden:?} -> {classes}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden,
            classes,
        })
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub config: HeadConfig,
    pub hidden: Vec<(Linear, BatchNorm)>,
    pub output: Linear,
    pub mode: Mode,
}

/// Per-hidden-layer batch statistics from a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub batch: usize,
    pub mean: Vec<Array1<f64>>,
    /// Biased (population) variance.
    pub var: Vec<Array1<f64>>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each linear layer (the last entry feeds the output layer).
    inputs: Vec<Array2<f64>>,
    normalized: Vec<Array2<f64>>,
    /// Post-BN, pre-ReLU activations.
    pre_relu: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    pub stats: BatchStats,
}

/// Gradients in parameter declaration order: for each hidden layer
/// `weight, bias, gamma, beta`, then output `weight, bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl HeadGrads {
    pub fn zeros_like(state: &HeadState) -> Self {
        Self {
            tensors: state.param_slices().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in layer {layer}")))
    }
}

impl HeadState {
    /// He-uniform linear weights, zero biases, identity batch norm.
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Self {
        let widths = config.widths();
        let mut linear = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Linear {
                weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.sample(dist)),
                bias: Array1::zeros(fan_out),
            }
        };
        let mut hidden = Vec::new();
        for k in 0..config.hidden.len() {
            hidden.push((linear(widths[k], widths[k + 1]), BatchNorm::new(widths[k + 1])));
        }
        let n = widths.len();
        let output = linear(widths[n - 2], widths[n - 1]);
        Self {
            config,
            hidden,
            output,
            mode: Mode::Training,
        }
    }

    /// All linear weights and biases zero, identity batch norm.
    pub fn zeros(config: HeadConfig) -> Self {
        let widths = config.widths();
        let lin = |i: usize, o: usize| Linear {
            weight: Array2::zeros((i, o)),
            bias: Array1::zeros(o),
        };
        let hidden = (0..config.hidden.len())
            .map(|k| (lin(widths[k], widths[k + 1]), BatchNorm::new(widths[k + 1])))
            .collect();
        let n = widths.len();
        let output = lin(widths[n - 2], widths[n - 1]);
        Self {
            config,
            hidden,
            output,
            mode: Mode::Training,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (lin, bn) in &self.hidden {
            out.push(lin.weight.as_slice().expect("standard layout"));
            out.push(lin.bias.as_slice().unwrap());
            out.push(bn.gamma.as_slice().unwrap());
            out.push(bn.beta.as_slice().unwrap());
        }
        out.push(self.output.weight.as_slice().expect("standard layout"));
        out.push(self.output.bias.as_slice().unwrap());
        out
    }

    /// Mutable parameter tensors with a flag telling whether weight decay applies.
    pub fn params_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out: Vec<(&mut [f64], bool)> = Vec::new();
        for (lin, bn) in &mut self.hidden {
            out.push((lin.weight.as_slice_mut().expect("standard layout"), true));
            out.push((lin.bias.as_slice_mut().unwrap(), true));
            out.push((bn.gamma.as_slice_mut().unwrap(), false));
            out.push((bn.beta.as_slice_mut().unwrap(), false));
        }
        out.push((self.output.weight.as_slice_mut().expect("standard layout"), true));
        out.push((self.output.bias.as_slice_mut().unwrap(), true));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::arg(format!(
                "feature width {} does not match head input {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass using running statistics. Never mutates the state.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for (k, (lin, bn)) in self.hidden.iter().enumerate() {
            let mut a = h.dot(&lin.weight) + &lin.bias;
            let inv_std = bn.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            a -= &bn.running_mean;
            a *= &inv_std;
            a *= &bn.gamma;
            a += &bn.beta;
            a.mapv_inplace(|v| v.max(0.0));
            check_finite(&a, k)?;
            h = a;
        }
        let z = h.dot(&self.output.weight) + &self.output.bias;
        check_finite(&z, self.hidden.len())?;
        Ok(z)
    }

    /// Training-mode forward pass using batch statistics. Returns the logits and
    /// the cache needed by [`HeadState::backward`]; running statistics are left
    /// untouched (see [`HeadState::update_running_stats`]).
    pub fn forward_train(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let n = x.nrows();
        if n < 2 && !self.hidden.is_empty() {
            return Err(Error::State(format!(
                "training-mode batch normalization needs a batch of at least 2, got {n}"
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::new(),
            normalized: Vec::new(),
            pre_relu: Vec::new(),
            inv_std: Vec::new(),
            stats: BatchStats {
                batch: n,
                mean: Vec::new(),
                var: Vec::new(),
            },
        };
        let mut h = x.to_owned();
        for (k, (lin, bn)) in self.hidden.iter().enumerate() {
            let a = h.dot(&lin.weight) + &lin.bias;
            let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &a - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let xhat = centered * &inv_std;
            let y = &xhat * &bn.gamma + &bn.beta;
            check_finite(&y, k)?;
            let out = y.mapv(|v| v.max(0.0));
            cache.inputs.push(h);
            cache.normalized.push(xhat);
            cache.pre_relu.push(y);
            cache.inv_std.push(inv_std);
            cache.stats.mean.push(mean);
            cache.stats.var.push(var);
            h = out;
        }
        let z = h.dot(&self.output.weight) + &self.output.bias;
        check_finite(&z, self.hidden.len())?;
        cache.inputs.push(h);
        Ok((z, cache))
    }

    /// Exponential moving average of batch statistics (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let n = stats.batch as f64;
        let correction = if stats.batch > 1 { n / (n - 1.0) } else { 1.0 };
        for ((_, bn), (mean, var)) in self.hidden.iter_mut().zip(stats.mean.iter().zip(&stats.var)) {
            let m = bn.momentum;
            bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
            bn.running_var = &bn.running_var * (1.0 - m) + &(var * (correction * m));
        }
    }

    /// Mode-dispatching forward pass. In training mode the running statistics are
    /// updated with the batch statistics.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self.mode {
            Mode::Inference => self.infer(x),
            Mode::Training => {
                let (z, cache) = self.forward_train(x)?;
                self.update_running_stats(&cache.stats);
                Ok(z)
            }
        }
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the output logits).
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> HeadGrads {
        let mut rev: Vec<Vec<f64>> = Vec::new();
        let last = cache.inputs.last().expect("output input cached");
        let dw = last.t().dot(dlogits);
        let db = dlogits.sum_axis(Axis(0));
        rev.push(db.to_vec());
        rev.push(dw.into_raw_vec_and_offset().0);
        let mut dh = dlogits.dot(&self.output.weight.t());

        for k in (0..self.hidden.len()).rev() {
            let (lin, bn) = &self.hidden[k];
            let n = dh.nrows() as f64;
            let mut dy = dh;
            dy.zip_mut_with(&cache.pre_relu[k], |g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
            let xhat = &cache.normalized[k];
            let dgamma = (&dy * xhat).sum_axis(Axis(0));
            let dbeta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * xhat).sum_axis(Axis(0));
            let da = (&dxhat * n - &sum_dxhat - &(xhat * &sum_dxhat_xhat)) * &(&cache.inv_std[k] / n);
            let dw = cache.inputs[k].t().dot(&da);
            let db = da.sum_axis(Axis(0));
            rev.push(dbeta.to_vec());
            rev.push(dgamma.to_vec());
            rev.push(db.to_vec());
            rev.push(dw.as_standard_layout().iter().copied().collect());
            dh = da.dot(&lin.weight.t());
        }
        rev.reverse();
        HeadGrads { tensors: rev }
    }
}

/// Rows of features with probability-vector targets (one-hot for true labels).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub features: Array2<f64>,
    pub targets: Array2<f64>,
}

impl TargetSet {
    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            targets: Array2::zeros((0, classes)),
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a set from `(feature, class)` rows with one-hot targets.
    pub fn from_hard<'a>(rows: impl IntoIterator<Item = (&'a [f32], usize)>, dim: usize, classes: usize) -> Result<Self> {
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for (f, c) in rows {
            if f.len() != dim || c >= classes {
                return Err(Error::arg(format!("bad labeled row: width {} class {c}", f.len())));
            }
            feats.extend(f.iter().map(|&v| v as f64));
            let mut t = vec![0.0; classes];
            t[c] = 1.0;
            targets.extend(t);
        }
        let n = targets.len() / classes;
        Ok(Self {
            features: Array2::from_shape_vec((n, dim), feats).unwrap(),
            targets: Array2::from_shape_vec((n, classes), targets).unwrap(),
        })
    }

    /// Builds a set from `(feature, probability vector)` rows.
    pub fn from_soft<'a>(rows: impl IntoIterator<Item = (&'a [f32], &'a [f64])>, dim: usize, classes: usize) -> Result<Self> {
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        for (f, t) in rows {
            if f.len() != dim || t.len() != classes {
                return Err(Error::arg(format!("bad soft row: width {} classes {}", f.len(), t.len())));
            }
            feats.extend(f.iter().map(|&v| v as f64));
            targets.extend_from_slice(t);
        }
        let n = targets.len() / classes;
        Ok(Self {
            features: Array2::from_shape_vec((n, dim), feats).unwrap(),
            targets: Array2::from_shape_vec((n, classes), targets).unwrap(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub loss_true: f64,
    pub loss_pseudo: f64,
    pub grads: HeadGrads,
    pub stats: BatchStats,
}

fn log_softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Combined loss `w * L_true + (1 - w) * L_pseudo` over one batch-normalized
/// forward pass of both sets, with exact gradients. An empty set contributes zero.
pub fn loss_and_grads(state: &HeadState, d_true: &TargetSet, d_pseudo: &TargetSet, w: f64) -> Result<LossOutput> {
    if d_true.is_empty() && d_pseudo.is_empty() {
        return Err(Error::arg("both the true-label and pseudo-label sets are empty"));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::arg(format!("loss weight {w} outside [0, 1]")));
    }
    let (nt, np) = (d_true.len(), d_pseudo.len());
    let x = ndarray::concatenate(Axis(0), &[d_true.features.view(), d_pseudo.features.view()])
        .map_err(|e| Error::arg(e.to_string()))?;
    let targets = ndarray::concatenate(Axis(0), &[d_true.targets.view(), d_pseudo.targets.view()])
        .map_err(|e| Error::arg(e.to_string()))?;
    if targets.ncols() != state.config.classes {
        return Err(Error::arg(format!(
            "targets have {} classes, head has {}",
            targets.ncols(),
            state.config.classes
        )));
    }
    let (z, cache) = state.forward_train(x.view())?;
    let logp = log_softmax_rows(&z);
    let ce: Vec<f64> = logp
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(lp, t)| -t.iter().zip(lp.iter()).filter(|(t, _)| **t != 0.0).map(|(t, l)| t * l).sum::<f64>())
        .collect();
    let loss_true = if nt > 0 { ce[..nt].iter().sum::<f64>() / nt as f64 } else { 0.0 };
    let loss_pseudo = if np > 0 { ce[nt..].iter().sum::<f64>() / np as f64 } else { 0.0 };
    let loss = w * loss_true + (1.0 - w) * loss_pseudo;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss (true {loss_true}, pseudo {loss_pseudo})")));
    }

    let mut dz = logp.mapv(f64::exp);
    for (i, (mut row, t)) in dz.rows_mut().into_iter().zip(targets.rows()).enumerate() {
        let scale = if i < nt { w / nt as f64 } else { (1.0 - w) / np as f64 };
        let mass: f64 = t.sum();
        row.zip_mut_with(&t, |p, &ti| *p = scale * (mass * *p - ti));
    }
    let grads = state.backward(&cache, &dz);
    Ok(LossOutput {
        loss,
        loss_true,
        loss_pseudo,
        grads,
        stats: cache.stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, state: &HeadState) -> Self {
        let zeros: Vec<Vec<f64>> = state.param_slices().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One decoupled-weight-decay Adam update of a single tensor.
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamWConfig, decay: bool) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        if decay && cfg.weight_decay != 0.0 {
            param[i] -= cfg.lr * cfg.weight_decay * param[i];
        }
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies one AdamW step. Batch-norm gains and shifts are not decayed; running
/// statistics are not parameters and are never touched here.
pub fn adamw_step(opt: &mut AdamWState, state: &mut HeadState, grads: &HeadGrads) -> Result<()> {
    let mut params = state.params_mut();
    if params.len() != grads.tensors.len() || params.len() != opt.m.len() {
        return Err(Error::arg(format!(
            "{} gradient tensors for {} parameters",
            grads.tensors.len(),
            params.len()
        )));
    }
    for (k, ((p, _), g)) in params.iter().zip(&grads.tensors).enumerate() {
        if p.len() != g.len() || p.len() != opt.m[k].len() {
            return Err(Error::arg(format!(
                "gradient tensor {k} has {} entries, parameter has {}",
                g.len(),
                p.len()
            )));
        }
    }
    opt.t += 1;
    let cfg = opt.config;
    for (k, (p, decay)) in params.iter_mut().enumerate() {
        adamw_update(p, &grads.tensors[k], &mut opt.m[k], &mut opt.v[k], opt.t, &cfg, *decay);
    }
    Ok(())
}

/// Class predictions: argmax of the inference-mode logits (ties to the smaller index).
pub fn predict_classes(state: &HeadState, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let z = state.infer(x)?;
    Ok(z.rows()
        .into_iter()
        .map(|r| crate::numerics::argmax(r.as_slice().expect("row-major")))
        .collect())
}
