//! Finite-width fully-connected ReLU network: parameters, forward pass,
//! exact reverse-mode gradients, and Hessian-vector products.
//!
//! # Parameter chart
//!
//! Stored weights are initialized `N(0, sigma_w^2 / fan_in)` and biases
//! `N(0, sigma_b^2)`, and the forward pass is the plain affine/ReLU chain.
//! All kernel and gradient-descent computations, however, run in the scaled
//! chart in which the tangent-kernel limit is width-independent: parameter
//! group `p` (one weight matrix or bias vector) carries the factor
//!
//! ```text
//! c_p = sigma_w^2 / fan_in   (weights)      c_p = sigma_b^2   (biases)
//! ```
//!
//! The empirical kernels are `sum_p c_p J_p J_p^T` (this is the
//! 1/width-corrected gradient Gram: `c_p ~ sigma_w^2 / width` for hidden
//! layers) and a gradient step with quoted rate `lr` updates group `p` by
//! `-lr * width * c_p * grad_p`. Under this convention a rate `eta_0/width`
//! produces width-independent function-space dynamics driven by the
//! empirical kernel, which is what the infinite-width theory describes.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ntk::NetConfig;

/// Widths above this are rejected by kernel-materializing operations.
pub const MAX_KERNEL_WIDTH: usize = 4096;

/// Parameters of an `L`-hidden-layer MLP with hidden width `width`,
/// input dimension `d` and output dimension `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MLPParams {
    /// Layer `i` weight matrix, `l_{i-1} x l_i`; `len() == L + 1`.
    pub weights: Vec<DMatrix<f64>>,
    /// Layer `i` bias vector, length `l_i`.
    pub biases: Vec<DVector<f64>>,
    pub cfg: NetConfig,
    pub width: usize,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
}

/// Gradient (or tangent) container with the same shapes as [`MLPParams`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

fn add_scaled(a: &mut [f64], scale: f64, b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += scale * y;
    }
}

impl Grads {
    pub fn zeros_like(p: &MLPParams) -> Self {
        Grads {
            weights: p.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: p.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// `self += scale * other`, per group.
    pub fn axpy(&mut self, scale: f64, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            add_scaled(a.as_mut_slice(), scale, b.as_slice());
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.axpy(scale, b, 1.0);
        }
    }

    /// `self += scale * c_p * other` with per-group chart factors.
    pub fn axpy_chart(&mut self, scale: f64, other: &Grads, factors: &ChartFactors) {
        for (i, (a, b)) in self.weights.iter_mut().zip(&other.weights).enumerate() {
            add_scaled(a.as_mut_slice(), scale * factors.weights[i], b.as_slice());
        }
        for (i, (a, b)) in self.biases.iter_mut().zip(&other.biases).enumerate() {
            a.axpy(scale * factors.biases[i], b, 1.0);
        }
    }

    /// Scale every group by its chart factor times `scale`.
    pub fn scale_chart(&mut self, scale: f64, factors: &ChartFactors) {
        for (i, w) in self.weights.iter_mut().enumerate() {
            *w *= scale * factors.weights[i];
        }
        for (i, b) in self.biases.iter_mut().enumerate() {
            *b *= scale * factors.biases[i];
        }
    }

    /// Flatten into a vector in the fixed parameter order
    /// (per layer: weights column-major, then bias), optionally scaling
    /// each group by `sqrt(c_p)`.
    pub fn flatten(&self, chart: Option<&ChartFactors>) -> DVector<f64> {
        let n: usize = self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = DVector::zeros(n);
        let mut pos = 0;
        for i in 0..self.weights.len() {
            let sw = chart.map_or(1.0, |f| f.weights[i].sqrt());
            for v in self.weights[i].iter() {
                out[pos] = v * sw;
                pos += 1;
            }
            let sb = chart.map_or(1.0, |f| f.biases[i].sqrt());
            for v in self.biases[i].iter() {
                out[pos] = v * sb;
                pos += 1;
            }
        }
        out
    }
}

/// Per-group chart factors `c_p` (see module docs).
#[derive(Debug, Clone)]
pub struct ChartFactors {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Forward-pass cache: pre-activations per layer plus the input.
pub struct ForwardCache {
    /// `a[0] = X`, `a[i]` = post-activation of layer `i` (n x l_i).
    pub acts: Vec<DMatrix<f64>>,
    /// Pre-activations `h[i]` of layer `i+1` (n x l_{i+1}).
    pub preacts: Vec<DMatrix<f64>>,
    /// Network output, n x k.
    pub output: DMatrix<f64>,
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v.max(0.0))
}

fn relu_mask_mul(pre: &DMatrix<f64>, m: &mut DMatrix<f64>) {
    for (p, v) in pre.iter().zip(m.iter_mut()) {
        if *p <= 0.0 {
            *v = 0.0;
        }
    }
}

impl MLPParams {
    /// Draw parameters i.i.d.: weights `N(0, sigma_w^2/fan_in)`, biases
    /// `N(0, sigma_b^2)`. Deterministic for a given seed.
    pub fn init(cfg: &NetConfig, width: usize, d: usize, k: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if width < 1 || d < 1 || k < 1 {
            return Err(Error::Validation(format!(
                "width, d, k must be >= 1 (got {width}, {d}, {k})"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dims = layer_dims(cfg.depth_l, width, d, k);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let std_w = (cfg.sigma_w_sq / fan_in as f64).sqrt();
            let std_b = cfg.sigma_b_sq.sqrt();
            weights.push(DMatrix::from_fn(fan_in, fan_out, |_, _| {
                let g: f64 = rng.sample(StandardNormal);
                g * std_w
            }));
            biases.push(DVector::from_fn(fan_out, |_, _| {
                let g: f64 = rng.sample(StandardNormal);
                g * std_b
            }));
        }
        Ok(MLPParams {
            weights,
            biases,
            cfg: *cfg,
            width,
            d,
            k,
            seed,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn chart_factors(&self) -> ChartFactors {
        ChartFactors {
            weights: self
                .weights
                .iter()
                .map(|w| self.cfg.sigma_w_sq / w.nrows() as f64)
                .collect(),
            biases: self.biases.iter().map(|_| self.cfg.sigma_b_sq).collect(),
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.d {
            return Err(Error::Shape(format!(
                "input feature dim {} does not match network d = {}",
                x.ncols(),
                self.d
            )));
        }
        Ok(())
    }

    pub fn forward_cache(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let layers = self.weights.len();
        let mut acts = Vec::with_capacity(layers);
        let mut preacts = Vec::with_capacity(layers);
        acts.push(x.clone());
        for i in 0..layers {
            let mut h = acts[i].clone() * &self.weights[i];
            for mut row in h.row_iter_mut() {
                row += self.biases[i].transpose();
            }
            if i + 1 < layers {
                acts.push(relu(&h));
            }
            preacts.push(h);
        }
        let output = preacts.last().unwrap().clone();
        Ok(ForwardCache { acts, preacts, output })
    }

    /// Network outputs on `x` (n x d), returned as n x k.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cache(x)?.output)
    }

    /// Reverse-mode pullback: gradients of `sum_{s,j} out_grad[s,j] * f_j(x_s)`
    /// with respect to every parameter.
    pub fn backprop(&self, cache: &ForwardCache, out_grad: &DMatrix<f64>) -> Grads {
        let layers = self.weights.len();
        let mut grads = Grads::zeros_like(self);
        let mut delta = out_grad.clone();
        for i in (0..layers).rev() {
            grads.weights[i] = self.acts_tr_mul(&cache.acts[i], &delta);
            grads.biases[i] = column_sums(&delta);
            if i > 0 {
                let mut prev = &delta * self.weights[i].transpose();
                relu_mask_mul(&cache.preacts[i - 1], &mut prev);
                delta = prev;
            }
        }
        grads
    }

    fn acts_tr_mul(&self, a: &DMatrix<f64>, delta: &DMatrix<f64>) -> DMatrix<f64> {
        a.transpose() * delta
    }

    /// Gradient of the squared loss `0.5 |f(x) - y|^2` together with the loss.
    pub fn loss_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Grads)> {
        let cache = self.forward_cache(x)?;
        if cache.output.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "labels {:?} do not match outputs {:?}",
                y.shape(),
                cache.output.shape()
            )));
        }
        let resid = &cache.output - y;
        let loss = 0.5 * resid.norm_squared();
        let grads = self.backprop(&cache, &resid);
        Ok((loss, grads))
    }

    /// Hessian-vector product of the squared support loss: `H(theta) u`
    /// where `H = d^2/dtheta^2 [0.5 |f(x) - y|^2]`.
    ///
    /// Computed by forward-over-reverse tangent propagation; the ReLU mask
    /// is held fixed at the primal pre-activations (the second derivative
    /// of ReLU vanishes almost everywhere).
    pub fn loss_hvp(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, u: &Grads) -> Result<Grads> {
        self.check_input(x)?;
        let layers = self.weights.len();
        // forward with tangents
        let mut acts = Vec::with_capacity(layers);
        let mut dacts = Vec::with_capacity(layers);
        let mut preacts = Vec::with_capacity(layers);
        acts.push(x.clone());
        dacts.push(DMatrix::zeros(x.nrows(), x.ncols()));
        for i in 0..layers {
            let mut h = &acts[i] * &self.weights[i];
            for mut row in h.row_iter_mut() {
                row += self.biases[i].transpose();
            }
            let mut dh = &dacts[i] * &self.weights[i] + &acts[i] * &u.weights[i];
            for mut row in dh.row_iter_mut() {
                row += u.biases[i].transpose();
            }
            if i + 1 < layers {
                acts.push(relu(&h));
                relu_mask_mul(&h, &mut dh);
                dacts.push(dh.clone());
            }
            preacts.push((h, dh));
        }
        let (out, dout) = preacts.last().unwrap();
        let delta0 = out - y;
        let ddelta0 = dout.clone();
        // backward with tangents
        let mut hvp = Grads::zeros_like(self);
        let mut delta = delta0;
        let mut ddelta = ddelta0;
        for i in (0..layers).rev() {
            hvp.weights[i] = dacts[i].transpose() * &delta + acts[i].transpose() * &ddelta;
            hvp.biases[i] = column_sums(&ddelta);
            if i > 0 {
                let mut prev = &delta * self.weights[i].transpose();
                let mut dprev = &ddelta * self.weights[i].transpose() + &delta * u.weights[i].transpose();
                relu_mask_mul(&preacts[i - 1].0, &mut prev);
                relu_mask_mul(&preacts[i - 1].0, &mut dprev);
                delta = prev;
                ddelta = dprev;
            }
        }
        Ok(hvp)
    }

    /// Plain-network Jacobian: `nk x D` matrix of `d f_j(x_s) / d theta`,
    /// rows ordered sample-major (`s * k + j`), columns in the fixed
    /// parameter order (per layer: weights column-major, then bias).
    pub fn jacobian(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cache = self.forward_cache(x)?;
        let n = x.nrows();
        let dim = self.num_params();
        let mut jac = DMatrix::zeros(n * self.k, dim);
        let mut seed_grad = DMatrix::zeros(n, self.k);
        for s in 0..n {
            for j in 0..self.k {
                seed_grad[(s, j)] = 1.0;
                let g = self.backprop(&cache, &seed_grad);
                seed_grad[(s, j)] = 0.0;
                jac.row_mut(s * self.k + j).copy_from(&g.flatten(None).transpose());
            }
        }
        Ok(jac)
    }

    /// One chart-scaled gradient step with quoted (raw-convention) rate `lr`:
    /// each group moves by `-lr * width * c_p * grad_p`.
    pub fn apply_step(&mut self, lr: f64, grads: &Grads) {
        let factors = self.chart_factors();
        let scale = lr * self.width as f64;
        for (i, w) in self.weights.iter_mut().enumerate() {
            add_scaled(
                w.as_mut_slice(),
                -scale * factors.weights[i],
                grads.weights[i].as_slice(),
            );
        }
        for (i, b) in self.biases.iter_mut().enumerate() {
            b.axpy(-scale * factors.biases[i], &grads.biases[i], 1.0);
        }
    }

    /// Euclidean distance to another parameter set in stored coordinates.
    pub fn param_distance(&self, other: &MLPParams) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            acc += (a - b).norm_squared();
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            acc += (a - b).norm_squared();
        }
        acc.sqrt()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"MKCP")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(self.cfg.depth_l as u32).to_le_bytes())?;
        f.write_all(&(self.width as u64).to_le_bytes())?;
        f.write_all(&(self.d as u64).to_le_bytes())?;
        f.write_all(&(self.k as u64).to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        f.write_all(&self.cfg.sigma_w_sq.to_le_bytes())?;
        f.write_all(&self.cfg.sigma_b_sq.to_le_bytes())?;
        for i in 0..self.weights.len() {
            for v in self.weights[i].iter() {
                f.write_all(&v.to_le_bytes())?;
            }
            for v in self.biases[i].iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"MKCP" {
            return Err(Error::Validation("bad checkpoint magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 1 {
            return Err(Error::Validation("unsupported checkpoint version".into()));
        }
        f.read_exact(&mut u32buf)?;
        let depth_l = u32::from_le_bytes(u32buf) as usize;
        let mut read_u64 = |f: &mut std::fs::File| -> Result<u64> {
            f.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let width = read_u64(&mut f)? as usize;
        let d = read_u64(&mut f)? as usize;
        let k = read_u64(&mut f)? as usize;
        let seed = read_u64(&mut f)?;
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |f: &mut std::fs::File| -> Result<f64> {
            f.read_exact(&mut f64buf)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let sigma_w_sq = read_f64(&mut f)?;
        let sigma_b_sq = read_f64(&mut f)?;
        let cfg = NetConfig {
            depth_l,
            sigma_w_sq,
            sigma_b_sq,
            activation: crate::ntk::Activation::Relu,
        };
        let dims = layer_dims(depth_l, width, d, k);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..dims.len() - 1 {
            let mut w = DMatrix::zeros(dims[i], dims[i + 1]);
            for v in w.iter_mut() {
                *v = read_f64(&mut f)?;
            }
            let mut b = DVector::zeros(dims[i + 1]);
            for v in b.iter_mut() {
                *v = read_f64(&mut f)?;
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(MLPParams {
            weights,
            biases,
            cfg,
            width,
            d,
            k,
            seed,
        })
    }
}

/// Layer widths `[d, width, ..., width, k]` for `L` hidden layers.
pub fn layer_dims(depth_l: usize, width: usize, d: usize, k: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(depth_l + 2);
    dims.push(d);
    dims.extend(std::iter::repeat(width).take(depth_l));
    dims.push(k);
    dims
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

pub fn check_kernel_width(width: usize) -> Result<()> {
    if width > MAX_KERNEL_WIDTH {
        return Err(Error::Resource(format!(
            "width {width} exceeds kernel-materialization cap {MAX_KERNEL_WIDTH}"
        )));
    }
    Ok(())
}
