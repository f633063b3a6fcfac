//! The meta neural kernel: time-evolution operators, the inner-loop
//! predictor `G`, the composite per-task-pair kernel block, and assembly
//! of full train/train and test/train kernel matrices.
//!
//! The composite block for tasks `i`, `j` with base kernel `Th` is
//!
//! ```text
//! B_ij = Th(Xi,Xj) + Th(Xi,Xi') Ti Th(Xi',Xj') Tj^T Th(Xj',Xj)
//!      - Th(Xi,Xi') Ti Th(Xi',Xj) - Th(Xi,Xj') Tj^T Th(Xj',Xj)
//! ```
//!
//! where `Ti = Th(Xi',Xi')^{-1}(I - exp(-lambda Th(Xi',Xi') tau))` is the
//! inner-loop time-evolution operator of task `i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, SymMatrix, CLIP_REL};
use crate::ntk::{kron_identity, ntk_matrix, NetConfig};
use crate::tasks::TaskData;

/// A finite time/step horizon or the infinite-time limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon {
    Finite(f64),
    Infinite,
}

impl Horizon {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Horizon::Infinite)
    }
}

impl Serialize for Horizon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Horizon::Finite(v) => s.serialize_f64(*v),
            Horizon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Horizon::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Horizon::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Configuration of the analytic (infinite-width) meta kernel.
///
/// `lambda_inner` and `eta_outer` are the effective rates entering the
/// exponentials `exp(-lambda Th tau)` and `exp(-eta Phi t)`; `tau` is
/// exposed as a real effective time since the analytic formulas only see
/// the product `lambda * tau` (the gradient-flow limit of the discrete
/// inner loop).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaKernelConfig {
    pub net: NetConfig,
    pub lambda_inner: f64,
    pub tau: Horizon,
    pub eta_outer: f64,
    pub t_outer: Horizon,
    pub ridge: f64,
}

impl Default for MetaKernelConfig {
    fn default() -> Self {
        // tau = inf, t = inf with a 1e-5 ridge: the vanishing-exponential
        // regime used throughout the synthetic experiments.
        MetaKernelConfig {
            net: NetConfig::default(),
            lambda_inner: 1.0,
            tau: Horizon::Infinite,
            eta_outer: 1.0,
            t_outer: Horizon::Infinite,
            ridge: 1e-5,
        }
    }
}

impl MetaKernelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.lambda_inner <= 0.0 {
            return Err(Error::Validation("lambda_inner must be > 0".into()));
        }
        if self.eta_outer <= 0.0 {
            return Err(Error::Validation("eta_outer must be > 0".into()));
        }
        if self.ridge < 0.0 {
            return Err(Error::Validation("ridge must be >= 0".into()));
        }
        if let Horizon::Finite(t) = self.tau {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Validation("tau must be finite and >= 0".into()));
            }
        }
        if let Horizon::Finite(t) = self.t_outer {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Validation("t_outer must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Time-evolution operator `K^{-1}(I - exp(-rate K steps))` of gradient
/// flow under a PSD kernel `K`, computed eigenvalue-wise as
/// `g(mu) = (1 - exp(-rate mu steps)) / mu` with `g(0) = rate * steps`.
///
/// `steps = Infinite` gives the (ridge-regularized) inverse. With
/// `ridge > 0` the denominator is `mu + ridge`; with `ridge = 0` small
/// eigenvalues are clipped as in [`crate::linalg::psd_solve`].
pub fn time_evolution(
    kernel: &SymMatrix,
    rate: f64,
    steps: Horizon,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if rate <= 0.0 {
        return Err(Error::Validation(format!("rate must be > 0, got {rate}")));
    }
    let eig = sym_eig(kernel)?;
    let n = eig.values.len();
    let lam_max = eig.values[n - 1].max(0.0);
    if eig.values[0] < -1e-8 * lam_max.max(f64::MIN_POSITIVE) {
        return Err(Error::Numeric(format!(
            "kernel is not PSD: min eigenvalue {:.3e} (max {:.3e})",
            eig.values[0], lam_max
        )));
    }
    let floor = CLIP_REL * lam_max;
    if steps.is_infinite() && ridge == 0.0 && floor == 0.0 {
        return Err(Error::Singular("zero kernel has no inverse".into()));
    }
    let g = |mu_raw: f64| -> f64 {
        let mu = mu_raw.max(0.0);
        match steps {
            Horizon::Infinite => {
                if ridge > 0.0 {
                    1.0 / (mu + ridge)
                } else {
                    1.0 / mu.max(floor)
                }
            }
            Horizon::Finite(s) => {
                let x = rate * mu * s;
                let num = 1.0 - (-x).exp();
                if ridge > 0.0 {
                    num / (mu + ridge)
                } else if x < 1e-8 {
                    // series limit of (1 - e^{-x})/mu as mu -> 0
                    rate * s * (1.0 - 0.5 * x)
                } else {
                    num / mu
                }
            }
        }
    };
    Ok(eig.assemble(g))
}

/// Per-task cache: support kernel evolution operator and support data.
struct TaskOperator {
    /// `T_i = time_evolution(Th(Xi', Xi'))`, m x m.
    t_tilde: DMatrix<f64>,
}

fn support_operator(task: &TaskData, cfg: &MetaKernelConfig) -> Result<TaskOperator> {
    let theta_ss = ntk_matrix(&task.x_sup, &task.x_sup, &cfg.net)?.theta;
    let sym = SymMatrix::new(theta_ss)?;
    let t_tilde = time_evolution(&sym, cfg.lambda_inner, cfg.tau, cfg.ridge)?;
    Ok(TaskOperator { t_tilde })
}

/// Inner-loop (base learner) predictions on `eval_points`:
/// `Th(eval, X') T_tilde Y'`. With `tau = Infinite` this is ridge kernel
/// regression on the support set.
pub fn inner_predictor_g(
    task: &TaskData,
    eval_points: &DMatrix<f64>,
    cfg: &MetaKernelConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if task.n_support() == 0 {
        return Err(Error::Validation("task support set is empty".into()));
    }
    let op = support_operator(task, cfg)?;
    let theta_es = ntk_matrix(eval_points, &task.x_sup, &cfg.net)?.theta;
    Ok(theta_es * op.t_tilde * &task.y_sup)
}

fn mnk_block_with(
    task_i: &TaskData,
    task_j: &TaskData,
    op_i: &TaskOperator,
    op_j: &TaskOperator,
    cfg: &MetaKernelConfig,
) -> Result<DMatrix<f64>> {
    let net = &cfg.net;
    let th_qq = ntk_matrix(&task_i.x, &task_j.x, net)?.theta;
    let th_qs_i = ntk_matrix(&task_i.x, &task_i.x_sup, net)?.theta;
    let th_qs_j = ntk_matrix(&task_i.x, &task_j.x_sup, net)?.theta;
    let th_ss = ntk_matrix(&task_i.x_sup, &task_j.x_sup, net)?.theta;
    let th_sq_i = ntk_matrix(&task_i.x_sup, &task_j.x, net)?.theta;
    let th_sq_j = ntk_matrix(&task_j.x_sup, &task_j.x, net)?.theta;

    let left = &th_qs_i * &op_i.t_tilde;
    let right = op_j.t_tilde.transpose() * &th_sq_j;
    let block = th_qq + &left * th_ss * &right - &left * th_sq_i - th_qs_j * &right;
    Ok(block)
}

/// One `kn x kn` block of the meta kernel between two tasks.
pub fn mnk_block(
    task_i: &TaskData,
    task_j: &TaskData,
    cfg: &MetaKernelConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let op_i = support_operator(task_i, cfg)?;
    let op_j = support_operator(task_j, cfg)?;
    let scalar = mnk_block_with(task_i, task_j, &op_i, &op_j, cfg)?;
    let k = task_i.y.ncols();
    Ok(kron_identity(&scalar, k))
}

/// Assembled block meta-kernel matrix with block location metadata.
#[derive(Debug, Clone)]
pub struct MnkMatrix {
    /// `knN_row x knN_col` block matrix.
    pub phi: DMatrix<f64>,
    /// Start offset of each row-task block.
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
    /// Rows per block (`k * n_row`) and columns per block (`k * n_col`).
    pub row_block: usize,
    pub col_block: usize,
}

impl MnkMatrix {
    /// Block (i, j) as an owned submatrix.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.phi
            .view(
                (self.row_offsets[i], self.col_offsets[j]),
                (self.row_block, self.col_block),
            )
            .into_owned()
    }

    /// Train/train matrices are symmetric by construction; wrap as
    /// [`SymMatrix`] for spectral work.
    pub fn to_sym(&self) -> Result<SymMatrix> {
        SymMatrix::new(self.phi.clone())
    }
}

fn check_task_consistency(tasks: &[&TaskData]) -> Result<(usize, usize)> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Validation("task list is empty".into()))?;
    let dims = first.dims();
    for t in tasks {
        if t.dims() != dims {
            return Err(Error::Shape(format!(
                "task dims {:?} differ from {:?}",
                t.dims(),
                dims
            )));
        }
    }
    Ok(dims)
}

/// Assemble the block meta-kernel for `row_tasks x col_tasks`. When both
/// lists are identical the upper triangle is computed and mirrored, which
/// both halves the work and enforces exact symmetry.
pub fn assemble_mnk(
    row_tasks: &[TaskData],
    col_tasks: &[TaskData],
    cfg: &MetaKernelConfig,
) -> Result<MnkMatrix> {
    cfg.validate()?;
    let all: Vec<&TaskData> = row_tasks.iter().chain(col_tasks.iter()).collect();
    let (_, k) = check_task_consistency(&all)?;
    let n_row = row_tasks.first().map(|t| t.n_query()).unwrap_or(0);
    let n_col = col_tasks.first().map(|t| t.n_query()).unwrap_or(0);
    if row_tasks.iter().any(|t| t.n_query() != n_row)
        || col_tasks.iter().any(|t| t.n_query() != n_col)
    {
        return Err(Error::Shape(
            "tasks on each side must share a query count".into(),
        ));
    }
    let row_block = n_row * k;
    let col_block = n_col * k;
    let symmetric = row_tasks == col_tasks;

    let row_ops: Vec<TaskOperator> = row_tasks
        .iter()
        .map(|t| support_operator(t, cfg))
        .collect::<Result<_>>()?;
    let col_ops: Vec<TaskOperator> = if symmetric {
        Vec::new()
    } else {
        col_tasks
            .iter()
            .map(|t| support_operator(t, cfg))
            .collect::<Result<_>>()?
    };

    let mut phi = DMatrix::zeros(row_block * row_tasks.len(), col_block * col_tasks.len());
    for i in 0..row_tasks.len() {
        let j_start = if symmetric { i } else { 0 };
        for j in j_start..col_tasks.len() {
            let op_j = if symmetric { &row_ops[j] } else { &col_ops[j] };
            let scalar = mnk_block_with(&row_tasks[i], &col_tasks[j], &row_ops[i], op_j, cfg)?;
            let b = kron_identity(&scalar, k);
            phi.view_mut((i * row_block, j * col_block), (row_block, col_block))
                .copy_from(&b);
            if symmetric && j > i {
                phi.view_mut((j * row_block, i * col_block), (row_block, col_block))
                    .copy_from(&b.transpose());
            }
        }
    }
    if symmetric {
        // mirror the diagonal blocks' rounding asymmetry too
        let sym = (&phi + phi.transpose()) * 0.5;
        phi = sym;
    }
    Ok(MnkMatrix {
        phi,
        row_offsets: (0..row_tasks.len()).map(|i| i * row_block).collect(),
        col_offsets: (0..col_tasks.len()).map(|j| j * col_block).collect(),
        row_block,
        col_block,
    })
}
