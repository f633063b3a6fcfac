//! Dense symmetric linear algebra: eigendecomposition, matrix functions,
//! and ridge-regularized solves.
//!
//! Everything downstream (NTK matrices, meta-kernel blocks, time-evolution
//! operators) reduces to spectral calculus on symmetric matrices, so this
//! module is the single place where decompositions happen.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before an input is rejected.
pub const SYM_TOL: f64 = 1e-10;

/// Eigenvalues below `CLIP_REL * lambda_max` are lifted to that floor when
/// inverting without ridge.
pub const CLIP_REL: f64 = 1e-10;

/// A dense real symmetric matrix.
///
/// Construction symmetrizes `(A + A^T)/2` after checking that the asymmetry
/// is within [`SYM_TOL`]; block assembly upstream produces ~1e-14 asymmetry
/// which this absorbs.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !scale.is_finite() {
            return Err(Error::Numeric("non-finite entries in matrix".into()));
        }
        let mut asym = 0.0f64;
        for i in 0..a.nrows() {
            for j in (i + 1)..a.ncols() {
                asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
            }
        }
        if asym > SYM_TOL * scale.max(f64::MIN_POSITIVE) && scale > 0.0 {
            return Err(Error::Shape(format!(
                "matrix asymmetry {asym:.3e} exceeds tolerance {:.3e}",
                SYM_TOL * scale
            )));
        }
        let sym = (&a + a.transpose()) * 0.5;
        Ok(SymMatrix { data: sym })
    }

    /// Build from a closure over (i, j); only the upper triangle is evaluated.
    pub fn from_fn(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(order, order);
        for i in 0..order {
            for j in i..order {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix { data: m }
    }

    pub fn order(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }
}

/// Eigendecomposition of a [`SymMatrix`]: `A = V diag(values) V^T` with
/// eigenvalues sorted ascending and orthonormal columns in `vectors`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    /// Reassemble `V diag(f(values)) V^T`.
    pub fn assemble(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        &scaled * self.vectors.transpose()
    }
}

/// Symmetric eigendecomposition with ascending eigenvalue order.
pub fn sym_eig(a: &SymMatrix) -> Result<EigenPair> {
    let n = a.order();
    let se = a
        .data
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric(format!("eigendecomposition failed for order {n}")))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| se.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in idx.iter().enumerate() {
        vectors.set_column(dst, &se.eigenvectors.column(src));
    }
    Ok(EigenPair { values, vectors })
}

/// Apply a scalar function to a symmetric matrix through its spectrum:
/// returns `V f(Lambda) V^T`.
///
/// Fails if `f` produces a non-finite value on any eigenvalue.
pub fn matrix_func(a: &SymMatrix, f: impl Fn(f64) -> f64) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    for &mu in eig.values.iter() {
        let v = f(mu);
        if !v.is_finite() {
            return Err(Error::Singular(format!(
                "scalar function undefined at eigenvalue {mu:.6e}"
            )));
        }
    }
    let m = eig.assemble(f);
    // spectral assembly is symmetric up to rounding
    SymMatrix::new(m)
}

/// Solve `(A + ridge I) X = B` for symmetric PSD `A` via eigendecomposition.
///
/// With `ridge == 0`, eigenvalues below `CLIP_REL * lambda_max` are lifted
/// to that floor; with `ridge > 0` no clipping is applied, the ridge
/// dominates.
pub fn psd_solve(a: &SymMatrix, b: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if ridge < 0.0 {
        return Err(Error::Validation(format!("ridge must be >= 0, got {ridge}")));
    }
    if b.nrows() != a.order() {
        return Err(Error::Shape(format!(
            "rhs has {} rows but matrix order is {}",
            b.nrows(),
            a.order()
        )));
    }
    let eig = sym_eig(a)?;
    let lam_max = eig.values[eig.values.len() - 1];
    let floor = CLIP_REL * lam_max.abs();
    if ridge == 0.0 && floor == 0.0 {
        return Err(Error::Singular(
            "all eigenvalues are zero and ridge is zero".into(),
        ));
    }
    let inv = |mu: f64| -> f64 {
        if ridge > 0.0 {
            1.0 / (mu + ridge)
        } else {
            1.0 / mu.max(floor)
        }
    };
    // V diag(1/(mu+ridge)) V^T B, applied without forming the inverse
    let vt_b = eig.vectors.transpose() * b;
    let mut scaled = vt_b;
    for i in 0..eig.values.len() {
        let w = inv(eig.values[i]);
        scaled.row_mut(i).scale_mut(w);
    }
    Ok(&eig.vectors * scaled)
}

/// Relative Frobenius distance `|a - b|_F / |b|_F` (absolute when `b = 0`).
pub fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom > 0.0 {
        diff / denom
    } else {
        diff
    }
}
