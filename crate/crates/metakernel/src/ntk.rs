//! Analytic Neural Tangent Kernel for fully-connected ReLU networks.
//!
//! The kernel is computed by the standard arc-cosine layer recursion, no
//! network is ever constructed. With
//! `rho = S(x,z)/sqrt(S(x,x) S(z,z))` per layer:
//!
//! ```text
//! S^1     = sigma_w^2 <x,z>/d + sigma_b^2
//! S^{h+1} = sigma_w^2 sqrt(Sxx Szz) (sqrt(1-rho^2) + rho (pi - acos rho)) / (2 pi) + sigma_b^2
//! Sd^{h+1}= sigma_w^2 (pi - acos rho) / (2 pi)
//! Th^1    = S^1,   Th^{h+1} = S^{h+1} + Th^h * Sd^{h+1}
//! ```
//!
//! The output is `Th^{L+1}`; the network-output covariance at initialization
//! (NNGP) is `S^{L+1}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// Architecture and initialization scales of the (real or idealized) network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of hidden layers, >= 1.
    pub depth_l: usize,
    /// Weight variance scale sigma_w^2 (> 0).
    pub sigma_w_sq: f64,
    /// Bias variance sigma_b^2 (>= 0).
    pub sigma_b_sq: f64,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        // He-style weight variance keeps the kernel diagonal O(1); the small
        // bias variance avoids exact degeneracy for orthogonal inputs.
        NetConfig {
            depth_l: 2,
            sigma_w_sq: 2.0,
            sigma_b_sq: 0.01,
            activation: Activation::Relu,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_l < 1 {
            return Err(Error::Validation("depth_l must be >= 1".into()));
        }
        if self.sigma_w_sq <= 0.0 {
            return Err(Error::Validation("sigma_w_sq must be > 0".into()));
        }
        if self.sigma_b_sq < 0.0 {
            return Err(Error::Validation("sigma_b_sq must be >= 0".into()));
        }
        Ok(())
    }
}

/// NTK and NNGP values between two sample sets.
#[derive(Debug, Clone)]
pub struct NtkMatrix {
    /// NTK values, `|X| x |Z|`.
    pub theta: DMatrix<f64>,
    /// Covariance of the initialization Gaussian, same shape.
    pub nngp: DMatrix<f64>,
}

fn check_samples(x: &DMatrix<f64>, name: &str) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Shape(format!("{name} must be nonempty")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// ReLU arc-cosine transforms of a correlation; rounding can push |rho|
/// to 1 + 1e-16 so it is clamped first.
fn relu_post_exp(rho: f64) -> f64 {
    let r = rho.clamp(-1.0, 1.0);
    ((1.0 - r * r).max(0.0).sqrt() + r * (std::f64::consts::PI - r.acos()))
        / (2.0 * std::f64::consts::PI)
}

fn relu_deriv_exp(rho: f64) -> f64 {
    let r = rho.clamp(-1.0, 1.0);
    (std::f64::consts::PI - r.acos()) / (2.0 * std::f64::consts::PI)
}

/// Analytic NTK between sample sets `x` (r x d) and `z` (c x d); rows are
/// samples.
pub fn ntk_matrix(x: &DMatrix<f64>, z: &DMatrix<f64>, cfg: &NetConfig) -> Result<NtkMatrix> {
    cfg.validate()?;
    check_samples(x, "x")?;
    check_samples(z, "z")?;
    if x.ncols() != z.ncols() {
        return Err(Error::Shape(format!(
            "feature dimension mismatch: {} vs {}",
            x.ncols(),
            z.ncols()
        )));
    }
    let d = x.ncols() as f64;
    let (r, c) = (x.nrows(), z.nrows());
    let sw = cfg.sigma_w_sq;
    let sb = cfg.sigma_b_sq;

    // first-layer covariances
    let mut s = x * z.transpose() * (sw / d);
    s.add_scalar_mut(sb);
    let mut dx: Vec<f64> = (0..r)
        .map(|i| sw * x.row(i).norm_squared() / d + sb)
        .collect();
    let mut dz: Vec<f64> = (0..c)
        .map(|j| sw * z.row(j).norm_squared() / d + sb)
        .collect();
    let mut theta = s.clone();

    for _ in 0..cfg.depth_l {
        let mut s_next = DMatrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let denom = (dx[i] * dz[j]).sqrt();
                let rho = if denom > 0.0 { s[(i, j)] / denom } else { 0.0 };
                s_next[(i, j)] = sw * denom * relu_post_exp(rho) + sb;
                theta[(i, j)] = s_next[(i, j)] + theta[(i, j)] * sw * relu_deriv_exp(rho);
            }
        }
        for v in dx.iter_mut() {
            *v = sw * *v * 0.5 + sb;
        }
        for v in dz.iter_mut() {
            *v = sw * *v * 0.5 + sb;
        }
        s = s_next;
    }
    Ok(NtkMatrix { theta, nngp: s })
}

/// Expand a scalar-output kernel to `k` independent output heads:
/// `K ⊗ I_k`, block-diagonal across output dimensions.
///
/// Output ordering is sample-major: index `= sample * k + head`, matching
/// the row-major flattening of an `n x k` label matrix.
pub fn kron_identity(k_mat: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    if k == 1 {
        return k_mat.clone();
    }
    let (r, c) = k_mat.shape();
    let mut out = DMatrix::zeros(r * k, c * k);
    for i in 0..r {
        for j in 0..c {
            let v = k_mat[(i, j)];
            for h in 0..k {
                out[(i * k + h, j * k + h)] = v;
            }
        }
    }
    out
}
