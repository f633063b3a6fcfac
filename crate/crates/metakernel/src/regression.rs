//! Closed-form meta predictions from the analytic meta kernel, the
//! pseudo-functional-gradient (PFG) decomposition, and the norm-based
//! generalization bound.
//!
//! The meta predictor on a test task is
//!
//! ```text
//! F_t(test) = G(test) + Phi(test, train) T(t) (Y - G(train))
//! ```
//!
//! where `G` is the inner-loop predictor, `Phi` the assembled meta kernel
//! over the training tasks and `T(t)` the outer time-evolution operator.
//! The correction term is `-PFG`, so `meta = base - pfg` exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{psd_solve, sym_eig};
use crate::mnk::{assemble_mnk, inner_predictor_g, time_evolution, MetaKernelConfig};
use crate::tasks::TaskData;

/// Flatten query labels of a task list into one vector: task-major,
/// sample-major within a task, output head fastest.
pub fn stack_query_labels(tasks: &[TaskData]) -> DVector<f64> {
    let total: usize = tasks.iter().map(|t| t.y.len()).sum();
    let mut out = DVector::zeros(total);
    let mut pos = 0;
    for t in tasks {
        for s in 0..t.y.nrows() {
            for h in 0..t.y.ncols() {
                out[pos] = t.y[(s, h)];
                pos += 1;
            }
        }
    }
    out
}

/// Flatten an `n x k` output matrix with the same ordering.
pub fn stack_outputs(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.len());
    let mut pos = 0;
    for s in 0..m.nrows() {
        for h in 0..m.ncols() {
            out[pos] = m[(s, h)];
            pos += 1;
        }
    }
    out
}

/// Inverse of [`stack_outputs`].
pub fn unstack_outputs(v: &DVector<f64>, n: usize, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, k);
    for s in 0..n {
        for h in 0..k {
            out[(s, h)] = v[s * k + h];
        }
    }
    out
}

/// Meta prediction on a test task's query points together with its
/// additive decomposition; `values = base_learner - pfg` holds exactly.
#[derive(Debug, Clone)]
pub struct MetaPrediction {
    /// Meta-learned predictions, n x k.
    pub values: DMatrix<f64>,
    /// Inner-loop (base learner) predictions `G`, n x k.
    pub base_learner: DMatrix<f64>,
    /// Pseudo functional gradient contribution, n x k.
    pub pfg: DMatrix<f64>,
}

/// Norm-based generalization bound report.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// `(L + 1) * sqrt(y~' Phi^{-1} y~ / (N n))`.
    pub bound: f64,
    /// Base-learner residual `y~ = Y - G(train)` on the training tasks.
    pub y_tilde_g: DVector<f64>,
    /// Same bound with `y~` scaled to unit norm first.
    pub normalized_bound: f64,
    /// Smallest eigenvalue of the assembled train/train meta kernel.
    pub min_eig_phi: f64,
}

fn base_residual(train_tasks: &[TaskData], cfg: &MetaKernelConfig) -> Result<DVector<f64>> {
    let mut parts = Vec::with_capacity(train_tasks.len());
    for t in train_tasks {
        let g = inner_predictor_g(t, &t.x, cfg)?;
        parts.push(&t.y - g);
    }
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut pos = 0;
    for p in &parts {
        out.rows_mut(pos, p.len()).copy_from(&stack_outputs(p));
        pos += p.len();
    }
    Ok(out)
}

/// Closed-form meta prediction on the query points of `test_task`.
pub fn meta_predict(
    test_task: &TaskData,
    train_tasks: &[TaskData],
    cfg: &MetaKernelConfig,
) -> Result<MetaPrediction> {
    cfg.validate()?;
    if train_tasks.is_empty() {
        return Err(Error::Validation("no training tasks".into()));
    }
    let (n, k) = (test_task.n_query(), test_task.y.ncols());

    let base = inner_predictor_g(test_task, &test_task.x, cfg)?;
    let residual = base_residual(train_tasks, cfg)?;

    let phi_tt = assemble_mnk(train_tasks, train_tasks, cfg)?;
    let phi_xt = assemble_mnk(
        std::slice::from_ref(test_task),
        train_tasks,
        cfg,
    )?;
    let t_op = time_evolution(&phi_tt.to_sym()?, cfg.eta_outer, cfg.t_outer, cfg.ridge)?;
    let correction = &phi_xt.phi * t_op * residual;
    let correction = unstack_outputs(&correction, n, k);

    let values = &base + &correction;
    let pfg = &base - &values;
    Ok(MetaPrediction {
        values,
        base_learner: base,
        pfg,
    })
}

/// The components of [`meta_predict`] as `(base, meta, pfg)`.
pub fn pfg_decompose(pred: &MetaPrediction) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    (
        pred.base_learner.clone(),
        pred.values.clone(),
        pred.pfg.clone(),
    )
}

/// Norm-based bound on the expected test loss of the meta predictor.
///
/// `normalize` additionally reports the bound for the residual rescaled
/// to unit norm, which isolates the kernel-alignment factor from the
/// residual magnitude.
pub fn generalization_bound(
    train_tasks: &[TaskData],
    cfg: &MetaKernelConfig,
) -> Result<BoundReport> {
    cfg.validate()?;
    if train_tasks.is_empty() {
        return Err(Error::Validation("no training tasks".into()));
    }
    let big_n = train_tasks.len();
    let n = train_tasks[0].n_query();
    let depth = cfg.net.depth_l as f64;

    let y_tilde = base_residual(train_tasks, cfg)?;
    let phi = assemble_mnk(train_tasks, train_tasks, cfg)?.to_sym()?;
    let min_eig_phi = sym_eig(&phi)?.values[0];

    let rhs = DMatrix::from_column_slice(y_tilde.len(), 1, y_tilde.as_slice());
    let solved = psd_solve(&phi, &rhs, cfg.ridge)?;
    let quad = y_tilde.dot(&solved.column(0).into_owned());
    if quad < -1e-8 * y_tilde.norm_squared() {
        return Err(Error::Numeric(format!(
            "negative quadratic form {quad:.3e} in bound"
        )));
    }
    let bound = (depth + 1.0) * (quad.max(0.0) / (big_n as f64 * n as f64)).sqrt();

    let norm = y_tilde.norm();
    let normalized_bound = if norm > 0.0 { bound / norm } else { 0.0 };

    Ok(BoundReport {
        bound,
        y_tilde_g: y_tilde,
        normalized_bound,
        min_eig_phi,
    })
}

/// Mean-squared-error style test loss `0.5 * ||pred - y||^2`.
pub fn test_loss(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match labels {:?}",
            pred.shape(),
            y.shape()
        )));
    }
    Ok(0.5 * (pred - y).norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mnk::Horizon;
    use crate::ntk::ntk_matrix;
    use crate::tasks::gen_quadratic_tasks;

    /// Plain Gauss-Jordan inverse, independent of the library solvers.
    fn gauss_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut m = a.clone();
        let mut inv = DMatrix::identity(n, n);
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if m[(r, col)].abs() > m[(piv, col)].abs() {
                    piv = r;
                }
            }
            m.swap_rows(col, piv);
            inv.swap_rows(col, piv);
            let p = m[(col, col)];
            assert!(p.abs() > 1e-14, "singular pivot in test oracle");
            for c in 0..n {
                m[(col, c)] /= p;
                inv[(col, c)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = m[(r, col)];
                    for c in 0..n {
                        m[(r, c)] -= f * m[(col, c)];
                        inv[(r, c)] -= f * inv[(col, c)];
                    }
                }
            }
        }
        inv
    }

    fn theta(x: &DMatrix<f64>, z: &DMatrix<f64>, cfg: &MetaKernelConfig) -> DMatrix<f64> {
        ntk_matrix(x, z, &cfg.net).unwrap().theta
    }

    /// Dense evaluation of the full tau = inf, t = inf predictor built
    /// from scratch with the Gauss-Jordan oracle.
    fn oracle_predict(
        test: &TaskData,
        train: &[TaskData],
        cfg: &MetaKernelConfig,
    ) -> DMatrix<f64> {
        let ridge = cfg.ridge;
        let t_tilde = |t: &TaskData| {
            let mut th = theta(&t.x_sup, &t.x_sup, cfg);
            for i in 0..th.nrows() {
                th[(i, i)] += ridge;
            }
            gauss_inverse(&th)
        };
        let g_on = |t: &TaskData, pts: &DMatrix<f64>| {
            theta(pts, &t.x_sup, cfg) * t_tilde(t) * &t.y_sup
        };
        let block = |a: &TaskData, b: &TaskData| {
            let ta = t_tilde(a);
            let tb = t_tilde(b);
            theta(&a.x, &b.x, cfg)
                + theta(&a.x, &a.x_sup, cfg)
                    * &ta
                    * theta(&a.x_sup, &b.x_sup, cfg)
                    * tb.transpose()
                    * theta(&b.x_sup, &b.x, cfg)
                - theta(&a.x, &a.x_sup, cfg) * ta * theta(&a.x_sup, &b.x, cfg)
                - theta(&a.x, &b.x_sup, cfg) * tb.transpose() * theta(&b.x_sup, &b.x, cfg)
        };
        let n = train[0].n_query();
        let big = n * train.len();
        let mut phi = DMatrix::zeros(big, big);
        for (i, a) in train.iter().enumerate() {
            for (j, b) in train.iter().enumerate() {
                phi.view_mut((i * n, j * n), (n, n)).copy_from(&block(a, b));
            }
        }
        phi = (&phi + phi.transpose()) * 0.5;
        for i in 0..big {
            phi[(i, i)] += ridge;
        }
        let mut phi_xt = DMatrix::zeros(test.n_query(), big);
        for (j, b) in train.iter().enumerate() {
            phi_xt
                .view_mut((0, j * n), (test.n_query(), n))
                .copy_from(&block(test, b));
        }
        let mut resid = DVector::zeros(big);
        for (i, t) in train.iter().enumerate() {
            let r = &t.y - g_on(t, &t.x);
            resid.rows_mut(i * n, n).copy_from(&r.column(0).into_owned());
        }
        let corr = phi_xt * gauss_inverse(&phi) * resid;
        g_on(test, &test.x) + DMatrix::from_column_slice(test.n_query(), 1, corr.as_slice())
    }

    #[test]
    fn meta_predict_matches_dense_oracle() {
        let train = gen_quadratic_tasks(2, 6, 2, 9).unwrap();
        let test = gen_quadratic_tasks(1, 6, 2, 90).unwrap();
        let cfg = MetaKernelConfig::default();
        let pred = meta_predict(&test.tasks[0], &train.tasks, &cfg).unwrap();
        let oracle = oracle_predict(&test.tasks[0], &train.tasks, &cfg);
        let err = (&pred.values - &oracle).norm() / oracle.norm().max(1.0);
        assert!(err < 1e-8, "oracle mismatch {err}");
    }

    #[test]
    fn decomposition_is_exact() {
        let train = gen_quadratic_tasks(3, 5, 2, 4).unwrap();
        let test = gen_quadratic_tasks(1, 5, 2, 44).unwrap();
        let cfg = MetaKernelConfig::default();
        let pred = meta_predict(&test.tasks[0], &train.tasks, &cfg).unwrap();
        let recon = &pred.base_learner - &pred.pfg;
        assert!((recon - &pred.values).norm() < 1e-12);
        let (b, m, p) = pfg_decompose(&pred);
        assert!(((b - p) - m).norm() < 1e-12);
    }

    #[test]
    fn training_task_residual_shrinks() {
        // with t = inf and small ridge the meta predictor nearly
        // interpolates the training tasks' query labels
        let train = gen_quadratic_tasks(3, 6, 2, 12).unwrap();
        let cfg = MetaKernelConfig::default();
        for t in &train.tasks {
            let pred = meta_predict(t, &train.tasks, &cfg).unwrap();
            let meta_err = (&pred.values - &t.y).norm();
            let base_err = (&pred.base_learner - &t.y).norm();
            // the 1e-5 ridge leaves a small interpolation residual
            assert!(meta_err < 0.2 * base_err.max(1e-6), "{meta_err} vs {base_err}");
        }
    }

    #[test]
    fn bound_positive_and_scales_with_residual() {
        let train = gen_quadratic_tasks(4, 6, 2, 7).unwrap();
        let cfg = MetaKernelConfig::default();
        let rep = generalization_bound(&train.tasks, &cfg).unwrap();
        assert!(rep.bound > 0.0);
        assert!(rep.normalized_bound > 0.0);
        assert!(rep.min_eig_phi.is_finite());

        // doubling the labels doubles y~ and hence the bound, while the
        // normalized bound is scale-invariant
        let mut doubled = train.tasks.clone();
        for t in doubled.iter_mut() {
            t.y *= 2.0;
            t.y_sup *= 2.0;
        }
        let rep2 = generalization_bound(&doubled, &cfg).unwrap();
        assert!((rep2.bound - 2.0 * rep.bound).abs() < 1e-8 * rep.bound);
        assert!((rep2.normalized_bound - rep.normalized_bound).abs() < 1e-10);
    }

    #[test]
    fn bound_quadratic_form_matches_oracle() {
        let train = gen_quadratic_tasks(2, 5, 2, 3).unwrap();
        let cfg = MetaKernelConfig::default();
        let rep = generalization_bound(&train.tasks, &cfg).unwrap();

        let phi = assemble_mnk(&train.tasks, &train.tasks, &cfg).unwrap().phi;
        let mut phi_r = phi.clone();
        for i in 0..phi_r.nrows() {
            phi_r[(i, i)] += cfg.ridge;
        }
        let inv = gauss_inverse(&phi_r);
        let quad = rep.y_tilde_g.dot(&(&inv * &rep.y_tilde_g));
        let n_total = (train.tasks.len() * train.tasks[0].n_query()) as f64;
        let expect = (cfg.net.depth_l as f64 + 1.0) * (quad / n_total).sqrt();
        assert!((rep.bound - expect).abs() < 1e-8 * expect);
    }

    #[test]
    fn predictions_invariant_to_train_task_order() {
        let train = gen_quadratic_tasks(3, 5, 2, 8).unwrap();
        let test = gen_quadratic_tasks(1, 5, 2, 80).unwrap();
        let cfg = MetaKernelConfig::default();
        let a = meta_predict(&test.tasks[0], &train.tasks, &cfg).unwrap();
        let mut permuted = train.tasks.clone();
        permuted.rotate_left(1);
        let b = meta_predict(&test.tasks[0], &permuted, &cfg).unwrap();
        assert!((a.values - b.values).norm() < 1e-9);
    }

    #[test]
    fn finite_horizon_interpolates_between_base_and_infinite() {
        let train = gen_quadratic_tasks(2, 5, 2, 14).unwrap();
        let test = gen_quadratic_tasks(1, 5, 2, 41).unwrap();
        let inf_cfg = MetaKernelConfig::default();
        let pred_inf = meta_predict(&test.tasks[0], &train.tasks, &inf_cfg).unwrap();
        let mut prev = f64::INFINITY;
        for t in [0.1, 1.0, 10.0, 1000.0] {
            let cfg = MetaKernelConfig {
                t_outer: Horizon::Finite(t),
                ..inf_cfg
            };
            let pred = meta_predict(&test.tasks[0], &train.tasks, &cfg).unwrap();
            let gap = (&pred.values - &pred_inf.values).norm();
            assert!(gap < prev, "t = {t}: {gap} !< {prev}");
            prev = gap;
        }
    }

    #[test]
    fn stack_unstack_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = stack_outputs(&m);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unstack_outputs(&v, 2, 3), m);
    }

    #[test]
    fn test_loss_shape_checked() {
        let a = DMatrix::zeros(2, 1);
        let b = DMatrix::zeros(3, 1);
        assert!(test_loss(&a, &b).is_err());
        let c = DMatrix::from_element(2, 1, 1.0);
        assert_eq!(test_loss(&a, &c).unwrap(), 1.0);
    }
}
