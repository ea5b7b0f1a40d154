//! Fixed layer sequences with hand-written backward passes.
//!
//! Trainable parameters are laid out flat, layer by layer: affine weight
//! (row-major, `out × in`) then bias; batchnorm scale then shift. Running
//! batchnorm statistics are buffers, kept out of the trainable vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Decay of the running batchnorm statistics.
pub const BN_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Rectifier,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { in_dim: usize, out_dim: usize, bias: bool },
    Batchnorm { dim: usize },
    Activation { dim: usize, kind: ActivationKind },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Affine { in_dim, .. } => in_dim,
            LayerSpec::Batchnorm { dim } | LayerSpec::Activation { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Affine { out_dim, .. } => out_dim,
            LayerSpec::Batchnorm { dim } | LayerSpec::Activation { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine {
        /// `out_dim × in_dim`
        weight: Tensor2,
        bias: Option<Vec<f64>>,
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Activation {
        dim: usize,
        kind: ActivationKind,
    },
}

impl Layer {
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        match spec {
            LayerSpec::Affine { in_dim, out_dim, bias } => {
                let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let data = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
                Layer::Affine {
                    weight: Tensor2::from_vec(out_dim, in_dim, data).expect("sized"),
                    bias: bias.then(|| vec![0.0; out_dim]),
                }
            }
            LayerSpec::Batchnorm { dim } => Layer::Batchnorm {
                gamma: vec![1.0; dim],
                beta: vec![0.0; dim],
                running_mean: vec![0.0; dim],
                running_var: vec![1.0; dim],
            },
            LayerSpec::Activation { dim, kind } => Layer::Activation { dim, kind },
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Affine { weight, bias } => {
                LayerSpec::Affine { in_dim: weight.cols(), out_dim: weight.rows(), bias: bias.is_some() }
            }
            Layer::Batchnorm { gamma, .. } => LayerSpec::Batchnorm { dim: gamma.len() },
            Layer::Activation { dim, kind } => LayerSpec::Activation { dim: *dim, kind: *kind },
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Affine { weight, bias } => weight.data().len() + bias.as_ref().map_or(0, Vec::len),
            Layer::Batchnorm { gamma, .. } => 2 * gamma.len(),
            Layer::Activation { .. } => 0,
        }
    }

    fn num_buffers(&self) -> usize {
        match self {
            Layer::Batchnorm { gamma, .. } => 2 * gamma.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Affine { input: Tensor2 },
    BatchnormTrain { xhat: Tensor2, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    BatchnormEval { xhat: Tensor2, inv_std: Vec<f64> },
    Activation { input: Tensor2 },
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    rows: usize,
    out_dim: usize,
}

/// An ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        for w in specs.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!("layer chain breaks: {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(Self { layers: specs.iter().map(|&s| Layer::init(s, rng)).collect() })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let net = Self { layers };
        let specs = net.specs();
        for w in specs.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!("layer chain breaks: {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(net)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec().in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec().out_dim())
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Batchnorm { .. }))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn num_buffers(&self) -> usize {
        self.layers.iter().map(Layer::num_buffers).sum()
    }

    /// Appends the trainable parameters to `out`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            match l {
                Layer::Affine { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    if let Some(b) = bias {
                        out.extend_from_slice(b);
                    }
                }
                Layer::Batchnorm { gamma, beta, .. } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                Layer::Activation { .. } => {}
            }
        }
    }

    /// Reads trainable parameters from the front of `src`; returns how many were consumed.
    pub fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.num_params();
        if src.len() < need {
            return Err(Error::Shape(format!("need {need} parameters, got {}", src.len())));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[off..off + dst.len()]);
            off += dst.len();
        };
        for l in &mut self.layers {
            match l {
                Layer::Affine { weight, bias } => {
                    take(weight.data_mut());
                    if let Some(b) = bias {
                        take(b);
                    }
                }
                Layer::Batchnorm { gamma, beta, .. } => {
                    take(gamma);
                    take(beta);
                }
                Layer::Activation { .. } => {}
            }
        }
        Ok(off)
    }

    pub fn write_buffers(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            if let Layer::Batchnorm { running_mean, running_var, .. } = l {
                out.extend_from_slice(running_mean);
                out.extend_from_slice(running_var);
            }
        }
    }

    pub fn read_buffers(&mut self, src: &[f64]) -> Result<usize> {
        let need = self.num_buffers();
        if src.len() < need {
            return Err(Error::Shape(format!("need {need} buffer values, got {}", src.len())));
        }
        let mut off = 0;
        for l in &mut self.layers {
            if let Layer::Batchnorm { running_mean, running_var, .. } = l {
                for dst in [running_mean, running_var] {
                    let n = dst.len();
                    dst.copy_from_slice(&src[off..off + n]);
                    off += n;
                }
            }
        }
        Ok(off)
    }

    /// Pure forward pass. Train-mode batchnorm uses batch statistics, which
    /// are returned inside the cache; call [`Network::update_running_stats`]
    /// to fold them into the running averages.
    pub fn forward(&self, input: &Tensor2, mode: Mode) -> Result<(Tensor2, ForwardCache)> {
        if input.cols() != self.in_dim() {
            return Err(Error::Shape(format!("network expects {} input columns, got {}", self.in_dim(), input.cols())));
        }
        let rows = input.rows();
        if mode == Mode::Train && self.has_batchnorm() && rows < 2 {
            return Err(Error::DegenerateBatch(rows));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for l in &self.layers {
            x = match l {
                Layer::Affine { weight, bias } => {
                    let mut y = x.matmul_t(weight)?;
                    if let Some(b) = bias {
                        for r in 0..rows {
                            y.row_mut(r).iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
                        }
                    }
                    caches.push(LayerCache::Affine { input: x });
                    y
                }
                Layer::Batchnorm { gamma, beta, running_mean, running_var } => {
                    let d = gamma.len();
                    match mode {
                        Mode::Train => {
                            let n = rows as f64;
                            let mut mean = vec![0.0; d];
                            for r in 0..rows {
                                mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
                            }
                            mean.iter_mut().for_each(|m| *m /= n);
                            let mut var = vec![0.0; d];
                            for r in 0..rows {
                                for (j, v) in x.row(r).iter().enumerate() {
                                    let c = v - mean[j];
                                    var[j] += c * c;
                                }
                            }
                            var.iter_mut().for_each(|v| *v /= n);
                            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            let mut xhat = Tensor2::zeros(rows, d);
                            let mut y = Tensor2::zeros(rows, d);
                            for r in 0..rows {
                                for j in 0..d {
                                    let h = (x.get(r, j) - mean[j]) * inv_std[j];
                                    xhat.set(r, j, h);
                                    y.set(r, j, gamma[j] * h + beta[j]);
                                }
                            }
                            caches.push(LayerCache::BatchnormTrain { xhat, inv_std, mean, var });
                            y
                        }
                        Mode::Eval => {
                            let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                            let mut xhat = Tensor2::zeros(rows, d);
                            let mut y = Tensor2::zeros(rows, d);
                            for r in 0..rows {
                                for j in 0..d {
                                    let h = (x.get(r, j) - running_mean[j]) * inv_std[j];
                                    xhat.set(r, j, h);
                                    y.set(r, j, gamma[j] * h + beta[j]);
                                }
                            }
                            caches.push(LayerCache::BatchnormEval { xhat, inv_std });
                            y
                        }
                    }
                }
                Layer::Activation { kind, .. } => {
                    let y = match kind {
                        ActivationKind::Rectifier => x.map(|v| v.max(0.0)),
                        ActivationKind::Identity => x.clone(),
                    };
                    caches.push(LayerCache::Activation { input: x });
                    y
                }
            };
        }
        let out_dim = x.cols();
        Ok((x, ForwardCache { layers: caches, rows, out_dim }))
    }

    /// Eval-mode forward without keeping a cache.
    pub fn predict(&self, input: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward(input, Mode::Eval)?.0)
    }

    /// Folds the batch statistics of a train-mode cache into the running averages.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let n = cache.rows as f64;
        for (l, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Layer::Batchnorm { running_mean, running_var, .. }, LayerCache::BatchnormTrain { mean, var, .. }) =
                (l, c)
            {
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for j in 0..mean.len() {
                    running_mean[j] = BN_DECAY * running_mean[j] + (1.0 - BN_DECAY) * mean[j];
                    running_var[j] = BN_DECAY * running_var[j] + (1.0 - BN_DECAY) * var[j] * unbias;
                }
            }
        }
    }

    /// Backpropagates `output_grad`; returns the input gradient and the
    /// parameter gradient in flat layout.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Tensor2) -> Result<(Tensor2, Vec<f64>)> {
        if output_grad.shape() != (cache.rows, cache.out_dim) || cache.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "backward: gradient {:?} does not match cached output {:?}",
                output_grad.shape(),
                (cache.rows, cache.out_dim)
            )));
        }
        let mut grads = vec![0.0; self.num_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.num_params();
        }
        let rows = cache.rows;
        let mut g = output_grad.clone();
        for ((l, c), &off) in self.layers.iter().zip(&cache.layers).zip(&offsets).rev() {
            g = match (l, c) {
                (Layer::Affine { weight, bias }, LayerCache::Affine { input }) => {
                    let gw = g.t_matmul(input)?;
                    let nw = gw.data().len();
                    grads[off..off + nw].copy_from_slice(gw.data());
                    if bias.is_some() {
                        let gb = &mut grads[off + nw..off + nw + weight.rows()];
                        for r in 0..rows {
                            gb.iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                        }
                    }
                    g.matmul(weight)?
                }
                (Layer::Batchnorm { gamma, .. }, LayerCache::BatchnormTrain { xhat, inv_std, .. }) => {
                    let d = gamma.len();
                    let n = rows as f64;
                    let mut sum_g = vec![0.0; d];
                    let mut sum_gx = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            sum_g[j] += g.get(r, j);
                            sum_gx[j] += g.get(r, j) * xhat.get(r, j);
                        }
                    }
                    grads[off..off + d].copy_from_slice(&sum_gx);
                    grads[off + d..off + 2 * d].copy_from_slice(&sum_g);
                    let mut dx = Tensor2::zeros(rows, d);
                    for r in 0..rows {
                        for j in 0..d {
                            let v =
                                gamma[j] * inv_std[j] / n * (n * g.get(r, j) - sum_g[j] - xhat.get(r, j) * sum_gx[j]);
                            dx.set(r, j, v);
                        }
                    }
                    dx
                }
                (Layer::Batchnorm { gamma, .. }, LayerCache::BatchnormEval { xhat, inv_std }) => {
                    // running statistics are constants here
                    let d = gamma.len();
                    let mut dx = Tensor2::zeros(rows, d);
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.get(r, j);
                            grads[off + j] += gv * xhat.get(r, j);
                            grads[off + d + j] += gv;
                            dx.set(r, j, gv * gamma[j] * inv_std[j]);
                        }
                    }
                    dx
                }
                (Layer::Activation { kind, .. }, LayerCache::Activation { input }) => match kind {
                    ActivationKind::Rectifier => {
                        let mut dx = g.clone();
                        dx.data_mut().iter_mut().zip(input.data()).for_each(|(d, &x)| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                        dx
                    }
                    ActivationKind::Identity => g,
                },
                _ => return Err(Error::Shape("cache does not belong to this network".into())),
            };
        }
        Ok((g, grads))
    }
}

/// Convenience builder for `affine → rectifier → affine → …` stacks. The
/// last affine layer has no activation.
pub fn mlp_specs(dims: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        specs.push(LayerSpec::Affine { in_dim: w[0], out_dim: w[1], bias: true });
        if i + 2 < dims.len() {
            specs.push(LayerSpec::Activation { dim: w[1], kind: ActivationKind::Rectifier });
        }
    }
    specs
}
