//! Finite-width gradient-based meta-learning: the discrete inner loop,
//! exact bi-level training via reverse-mode through the unrolled inner
//! steps, the empirical meta kernel, and the linearized-evolution
//! predictor that the analytic kernel path is compared against.
//!
//! Learning rates follow the stored-parameter convention: a quoted rate
//! `lr` acts on parameter group `p` as `lr * width * c_p` where `c_p` is
//! the group's chart factor (see [`crate::net`]). The induced function
//! dynamics are then `dF = -lr * width * K_hat (F - Y)` with `K_hat` the
//! chart-scaled empirical kernel, so the effective rate entering the
//! analytic exponentials is `lr * width`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::mnk::{time_evolution, Horizon};
use crate::net::{check_kernel_width, Grads, MLPParams};
use crate::regression::{stack_outputs, stack_query_labels, unstack_outputs};
use crate::tasks::TaskData;

fn check_finite_loss(loss: f64, step: usize, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("{what} loss is {loss}"),
        });
    }
    Ok(())
}

/// Run `tau` inner gradient steps on the support set, keeping every
/// iterate (`tau + 1` entries including the input parameters).
fn inner_adapt_trace(
    params: &MLPParams,
    x_sup: &DMatrix<f64>,
    y_sup: &DMatrix<f64>,
    lambda: f64,
    tau: usize,
) -> Result<Vec<MLPParams>> {
    if lambda < 0.0 {
        return Err(Error::Validation(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut trace = Vec::with_capacity(tau + 1);
    trace.push(params.clone());
    if lambda == 0.0 {
        for _ in 0..tau {
            trace.push(params.clone());
        }
        return Ok(trace);
    }
    let mut cur = params.clone();
    for step in 0..tau {
        let (loss, grads) = cur.loss_grad(x_sup, y_sup)?;
        check_finite_loss(loss, step, "inner")?;
        cur.apply_step(lambda, &grads);
        trace.push(cur.clone());
    }
    Ok(trace)
}

/// Adapted parameters after `tau` inner gradient steps at rate `lambda`
/// on the task's support set. `tau = 0` or `lambda = 0` returns the
/// parameters unchanged.
pub fn inner_adapt(
    params: &MLPParams,
    x_sup: &DMatrix<f64>,
    y_sup: &DMatrix<f64>,
    lambda: f64,
    tau: usize,
) -> Result<MLPParams> {
    let mut trace = inner_adapt_trace(params, x_sup, y_sup, lambda, tau)?;
    Ok(trace.pop().expect("trace is nonempty"))
}

/// Network output on the task's query points after inner adaptation.
pub fn meta_output(
    params: &MLPParams,
    task: &TaskData,
    lambda: f64,
    tau: usize,
) -> Result<DMatrix<f64>> {
    let adapted = inner_adapt(params, &task.x_sup, &task.y_sup, lambda, tau)?;
    adapted.forward(&task.x)
}

/// Scale a covector by the inner-step diagonal `lambda * width * c_p`.
fn chart_scaled(params: &MLPParams, lambda: f64, v: &Grads) -> Grads {
    let mut u = Grads::zeros_like(params);
    u.axpy_chart(lambda * params.width as f64, v, &params.chart_factors());
    u
}

/// Query loss of one task and its exact gradient with respect to the
/// meta parameters, differentiating through the unrolled inner loop.
///
/// The pullback through inner step `j` is
/// `v <- v - H(theta_j) (Lambda v)` with `H` the support-loss Hessian
/// and `Lambda` the per-group inner-step scaling, evaluated as one
/// Hessian-vector product per step.
pub fn outer_grad_task(
    params: &MLPParams,
    task: &TaskData,
    lambda: f64,
    tau: usize,
) -> Result<(f64, Grads)> {
    let trace = inner_adapt_trace(params, &task.x_sup, &task.y_sup, lambda, tau)?;
    let adapted = trace.last().expect("trace is nonempty");
    let cache = adapted.forward_cache(&task.x)?;
    if cache.output.shape() != task.y.shape() {
        return Err(Error::Shape(format!(
            "query labels {:?} do not match outputs {:?}",
            task.y.shape(),
            cache.output.shape()
        )));
    }
    let resid = &cache.output - &task.y;
    let loss = 0.5 * resid.norm_squared();
    let mut v = adapted.backprop(&cache, &resid);
    if lambda > 0.0 {
        for j in (0..tau).rev() {
            let u = chart_scaled(&trace[j], lambda, &v);
            let hvp = trace[j].loss_hvp(&task.x_sup, &task.y_sup, &u)?;
            v.axpy(-1.0, &hvp);
        }
    }
    Ok((loss, v))
}

/// Loss and drift history of a meta-training run. Entry `s` is recorded
/// before update `s`, and a final entry is appended after the last
/// update, so both vectors have `steps + 1` entries.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Summed query loss over all tasks.
    pub losses: Vec<f64>,
    /// Euclidean distance of the meta parameters from initialization.
    pub param_drift: Vec<f64>,
}

/// Full-batch meta gradient descent with an observer called after each
/// recorded point (including the initial one) with the step index and
/// current parameters.
pub fn maml_train_gd_observed(
    params0: &MLPParams,
    tasks: &[TaskData],
    eta: f64,
    lambda: f64,
    tau: usize,
    steps: usize,
    mut observer: impl FnMut(usize, &MLPParams) -> Result<()>,
) -> Result<(MLPParams, TrainTrace)> {
    if tasks.is_empty() {
        return Err(Error::Validation("no training tasks".into()));
    }
    if eta <= 0.0 {
        return Err(Error::Validation(format!("eta must be > 0, got {eta}")));
    }
    let mut cur = params0.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    let mut drift = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let mut total = Grads::zeros_like(&cur);
        let mut loss_sum = 0.0;
        for task in tasks {
            let (loss, g) = outer_grad_task(&cur, task, lambda, tau)?;
            loss_sum += loss;
            total.axpy(1.0, &g);
        }
        check_finite_loss(loss_sum, step, "outer")?;
        losses.push(loss_sum);
        drift.push(cur.param_distance(params0));
        observer(step, &cur)?;
        cur.apply_step(eta, &total);
    }
    let mut final_loss = 0.0;
    for task in tasks {
        let out = meta_output(&cur, task, lambda, tau)?;
        final_loss += 0.5 * (&out - &task.y).norm_squared();
    }
    check_finite_loss(final_loss, steps, "outer")?;
    losses.push(final_loss);
    drift.push(cur.param_distance(params0));
    observer(steps, &cur)?;
    Ok((cur, TrainTrace { losses, param_drift: drift }))
}

/// Full-batch meta gradient descent for `steps` outer updates.
pub fn maml_train_gd(
    params0: &MLPParams,
    tasks: &[TaskData],
    eta: f64,
    lambda: f64,
    tau: usize,
    steps: usize,
) -> Result<(MLPParams, TrainTrace)> {
    maml_train_gd_observed(params0, tasks, eta, lambda, tau, steps, |_, _| Ok(()))
}

/// One-pass stochastic meta training: a single outer update per task in
/// order, then a uniformly random iterate (excluding the last) is
/// selected with the given seed. Returns the selected parameters, the
/// full iterate list (`N + 1` entries) and the selected index.
pub fn maml_train_sgd(
    params0: &MLPParams,
    tasks: &[TaskData],
    eta: f64,
    lambda: f64,
    tau: usize,
    seed: u64,
) -> Result<(MLPParams, Vec<MLPParams>, usize)> {
    use rand::Rng;
    use rand::SeedableRng;
    if tasks.is_empty() {
        return Err(Error::Validation("no training tasks".into()));
    }
    let mut iterates = Vec::with_capacity(tasks.len() + 1);
    iterates.push(params0.clone());
    let mut cur = params0.clone();
    for (step, task) in tasks.iter().enumerate() {
        let (loss, g) = outer_grad_task(&cur, task, lambda, tau)?;
        check_finite_loss(loss, step, "outer")?;
        cur.apply_step(eta, &g);
        iterates.push(cur.clone());
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let pick = rng.gen_range(0..tasks.len());
    Ok((iterates[pick].clone(), iterates, pick))
}

/// Chart-scaled meta Jacobian of one task: row `(s, j)` is the gradient
/// of adapted query output `f_j(x_s)` with respect to the meta
/// parameters, with each group scaled by `sqrt(c_p)`.
fn meta_jacobian_chart(
    params: &MLPParams,
    task: &TaskData,
    lambda: f64,
    tau: usize,
) -> Result<DMatrix<f64>> {
    let trace = inner_adapt_trace(params, &task.x_sup, &task.y_sup, lambda, tau)?;
    let adapted = trace.last().expect("trace is nonempty");
    let cache = adapted.forward_cache(&task.x)?;
    let (n, k) = (task.n_query(), adapted.k);
    let factors = params.chart_factors();
    let mut jac = DMatrix::zeros(n * k, params.num_params());
    let mut seed_mat = DMatrix::zeros(n, k);
    for s in 0..n {
        for j in 0..k {
            seed_mat[(s, j)] = 1.0;
            let mut v = adapted.backprop(&cache, &seed_mat);
            seed_mat[(s, j)] = 0.0;
            if lambda > 0.0 {
                for step in (0..tau).rev() {
                    let u = chart_scaled(&trace[step], lambda, &v);
                    let hvp = trace[step].loss_hvp(&task.x_sup, &task.y_sup, &u)?;
                    v.axpy(-1.0, &hvp);
                }
            }
            jac.row_mut(s * k + j)
                .copy_from(&v.flatten(Some(&factors)).transpose());
        }
    }
    Ok(jac)
}

/// Chart-scaled meta Jacobians of a task list, stacked task-major.
fn stacked_meta_jacobian(
    params: &MLPParams,
    tasks: &[TaskData],
    lambda: f64,
    tau: usize,
) -> Result<DMatrix<f64>> {
    let rows: usize = tasks.iter().map(|t| t.n_query() * params.k).sum();
    let mut jac = DMatrix::zeros(rows, params.num_params());
    let mut pos = 0;
    for task in tasks {
        let j = meta_jacobian_chart(params, task, lambda, tau)?;
        jac.rows_mut(pos, j.nrows()).copy_from(&j);
        pos += j.nrows();
    }
    Ok(jac)
}

/// Empirical (finite-width) meta kernel of a task list: the Gram matrix
/// of chart-scaled meta Jacobians. With `tau = 0` this is the plain
/// empirical NTK Gram on the query points. As width grows it converges
/// to the analytic meta kernel with effective inner rate
/// `lambda * width` over `tau` unit time steps.
///
/// Memory scales as (total query outputs) x (parameter count); the
/// width cap in [`crate::net`] keeps this bounded.
pub fn empirical_meta_kernel(
    params: &MLPParams,
    tasks: &[TaskData],
    lambda: f64,
    tau: usize,
) -> Result<SymMatrix> {
    check_kernel_width(params.width)?;
    if tasks.is_empty() {
        return Err(Error::Validation("no tasks".into()));
    }
    let jac = stacked_meta_jacobian(params, tasks, lambda, tau)?;
    SymMatrix::new(&jac * jac.transpose())
}

/// Configuration of the linearized finite-width evolution predictor.
///
/// `lambda`, `tau` describe the discrete inner loop; `eta` is the quoted
/// outer rate and `t` the outer horizon in training steps, so the
/// operator exponent is `eta * width * K_hat * t`. `zero_f0` drops the
/// initialization outputs, matching the deterministic kernel predictor.
#[derive(Debug, Clone, Copy)]
pub struct EvolutionConfig {
    pub lambda: f64,
    pub tau: usize,
    pub eta: f64,
    pub t: Horizon,
    pub ridge: f64,
    pub zero_f0: bool,
}

/// Closed-form meta predictions of the linearized finite-width network:
/// the empirical-kernel analogue of the analytic meta predictor, built
/// from the meta Jacobians at `params0`.
pub fn analytic_meta_output(
    params0: &MLPParams,
    test_task: &TaskData,
    train_tasks: &[TaskData],
    ec: &EvolutionConfig,
) -> Result<DMatrix<f64>> {
    check_kernel_width(params0.width)?;
    if train_tasks.is_empty() {
        return Err(Error::Validation("no training tasks".into()));
    }
    let (n, k) = (test_task.n_query(), params0.k);

    let jac_train = stacked_meta_jacobian(params0, train_tasks, ec.lambda, ec.tau)?;
    let jac_test = meta_jacobian_chart(params0, test_task, ec.lambda, ec.tau)?;
    let k_tt = SymMatrix::new(&jac_train * jac_train.transpose())?;
    let k_xt = &jac_test * jac_train.transpose();

    let rate = ec.eta * params0.width as f64;
    let t_op = time_evolution(&k_tt, rate, ec.t, ec.ridge)?;

    let labels = stack_query_labels(train_tasks);
    let mut f0_train = DVector::zeros(labels.len());
    let mut f0_test = DMatrix::zeros(n, k);
    if !ec.zero_f0 {
        let mut pos = 0;
        for task in train_tasks {
            let out = meta_output(params0, task, ec.lambda, ec.tau)?;
            f0_train.rows_mut(pos, out.len()).copy_from(&stack_outputs(&out));
            pos += out.len();
        }
        f0_test = meta_output(params0, test_task, ec.lambda, ec.tau)?;
    }
    let corr = k_xt * t_op * (labels - f0_train);
    Ok(f0_test + unstack_outputs(&corr, n, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::MLPParams;
    use crate::ntk::NetConfig;
    use crate::tasks::gen_quadratic_tasks;

    fn small_net(width: usize, seed: u64) -> MLPParams {
        MLPParams::init(&NetConfig::default(), width, 1, 1, seed).unwrap()
    }

    #[test]
    fn zero_steps_and_zero_rate_are_identity() {
        let p = small_net(8, 1);
        let batch = gen_quadratic_tasks(1, 4, 2, 3).unwrap();
        let t = &batch.tasks[0];
        let a = inner_adapt(&p, &t.x_sup, &t.y_sup, 0.1, 0).unwrap();
        assert_eq!(a, p);
        let b = inner_adapt(&p, &t.x_sup, &t.y_sup, 0.0, 5).unwrap();
        assert_eq!(b, p);
    }

    #[test]
    fn adaptation_reduces_support_loss() {
        let p = small_net(64, 2);
        let batch = gen_quadratic_tasks(1, 4, 4, 9).unwrap();
        let t = &batch.tasks[0];
        let (loss0, _) = p.loss_grad(&t.x_sup, &t.y_sup).unwrap();
        // quoted rate scales by width, so the effective rate is 0.128
        let a = inner_adapt(&p, &t.x_sup, &t.y_sup, 0.002, 10).unwrap();
        let (loss1, _) = a.loss_grad(&t.x_sup, &t.y_sup).unwrap();
        assert!(loss1 < loss0, "{loss1} !< {loss0}");
    }

    #[test]
    fn divergent_inner_rate_reports_step() {
        let p = small_net(32, 3);
        let batch = gen_quadratic_tasks(1, 4, 4, 9).unwrap();
        let t = &batch.tasks[0];
        let err = inner_adapt(&p, &t.x_sup, &t.y_sup, 1e6, 400).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert!(step > 0),
            e => panic!("expected divergence, got {e}"),
        }
    }

    #[test]
    fn one_inner_step_matches_hand_gradient() {
        // one step must equal theta - lambda * width * c_p * grad_p
        let p = small_net(8, 4);
        let batch = gen_quadratic_tasks(1, 4, 2, 5).unwrap();
        let t = &batch.tasks[0];
        let lambda = 0.01;
        let a = inner_adapt(&p, &t.x_sup, &t.y_sup, lambda, 1).unwrap();
        let (_, g) = p.loss_grad(&t.x_sup, &t.y_sup).unwrap();
        let f = p.chart_factors();
        for (i, (w, w0)) in a.weights.iter().zip(&p.weights).enumerate() {
            let expect = w0 - &g.weights[i] * (lambda * p.width as f64 * f.weights[i]);
            assert!((w - expect).norm() < 1e-14);
        }
        for (i, (b, b0)) in a.biases.iter().zip(&p.biases).enumerate() {
            let expect = b0 - &g.biases[i] * (lambda * p.width as f64 * f.biases[i]);
            assert!((b - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let p = small_net(8, 7);
        let batch = gen_quadratic_tasks(2, 3, 2, 11).unwrap();
        let lambda = 0.02;
        let tau = 3;
        let task = &batch.tasks[0];
        let (_, grad) = outer_grad_task(&p, task, lambda, tau).unwrap();
        let flat = grad.flatten(None);

        let loss_at = |q: &MLPParams| -> f64 {
            let out = meta_output(q, task, lambda, tau).unwrap();
            0.5 * (&out - &task.y).norm_squared()
        };
        let h = 1e-5;
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let dim = p.num_params();
        let mut checked = 0;
        while checked < 20 {
            let idx = rng.gen_range(0..dim);
            let (mut plus, mut minus) = (p.clone(), p.clone());
            perturb(&mut plus, idx, h);
            perturb(&mut minus, idx, -h);
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let an = flat[idx];
            let denom = fd.abs().max(an.abs());
            if denom < 1e-7 {
                continue;
            }
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "coord {idx}: fd {fd} vs analytic {an}"
            );
            checked += 1;
        }
    }

    fn perturb(p: &mut MLPParams, mut idx: usize, h: f64) {
        // same flattening order as Grads::flatten
        for i in 0..p.weights.len() {
            if idx < p.weights[i].len() {
                p.weights[i].as_mut_slice()[idx] += h;
                return;
            }
            idx -= p.weights[i].len();
            if idx < p.biases[i].len() {
                p.biases[i][idx] += h;
                return;
            }
            idx -= p.biases[i].len();
        }
        unreachable!("index out of range");
    }

    #[test]
    fn gd_zero_steps_records_initial_loss() {
        let p = small_net(16, 5);
        let batch = gen_quadratic_tasks(2, 4, 2, 21).unwrap();
        let (out, trace) = maml_train_gd(&p, &batch.tasks, 0.01, 0.02, 1, 0).unwrap();
        assert_eq!(out, p);
        assert_eq!(trace.losses.len(), 1);
        assert_eq!(trace.param_drift, vec![0.0]);
    }

    #[test]
    fn gd_training_reduces_meta_loss() {
        let p = small_net(64, 6);
        let batch = gen_quadratic_tasks(3, 4, 2, 31).unwrap();
        let (lambda, tau) = (0.002, 2);
        // pick a stable outer rate from the empirical kernel spectrum
        let k = empirical_meta_kernel(&p, &batch.tasks, lambda, tau).unwrap();
        let eig = crate::linalg::sym_eig(&k).unwrap();
        let eta = 1.0 / (eig.values[eig.values.len() - 1] * p.width as f64);
        let (_, trace) = maml_train_gd(&p, &batch.tasks, eta, lambda, tau, 30).unwrap();
        let first = trace.losses[0];
        let last = *trace.losses.last().unwrap();
        assert!(last < 0.5 * first, "{last} !< 0.5 * {first}");
        assert!(trace.param_drift.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn sgd_is_deterministic_and_selects_early_iterate() {
        let p = small_net(16, 8);
        let batch = gen_quadratic_tasks(3, 4, 2, 41).unwrap();
        let (sel1, iters1, pick1) =
            maml_train_sgd(&p, &batch.tasks, 0.01, 0.02, 1, 123).unwrap();
        let (sel2, iters2, pick2) =
            maml_train_sgd(&p, &batch.tasks, 0.01, 0.02, 1, 123).unwrap();
        assert_eq!(pick1, pick2);
        assert_eq!(sel1, sel2);
        assert_eq!(iters1.len(), batch.tasks.len() + 1);
        assert!(pick1 < batch.tasks.len());
        assert_eq!(iters1[pick1], sel1);
        assert_eq!(iters2.len(), iters1.len());
    }

    #[test]
    fn tau_zero_kernel_is_plain_ntk_gram() {
        let p = small_net(32, 9);
        let batch = gen_quadratic_tasks(2, 3, 2, 51).unwrap();
        let meta = empirical_meta_kernel(&p, &batch.tasks, 0.1, 0).unwrap();
        // plain chart-scaled NTK Gram on stacked query points
        let f = p.chart_factors();
        let rows: usize = batch.tasks.iter().map(|t| t.n_query()).sum();
        let mut jac = DMatrix::zeros(rows, p.num_params());
        let mut pos = 0;
        for t in &batch.tasks {
            let cache = p.forward_cache(&t.x).unwrap();
            for s in 0..t.n_query() {
                let mut seed_mat = DMatrix::zeros(t.n_query(), 1);
                seed_mat[(s, 0)] = 1.0;
                let g = p.backprop(&cache, &seed_mat);
                jac.row_mut(pos).copy_from(&g.flatten(Some(&f)).transpose());
                pos += 1;
            }
        }
        let plain = &jac * jac.transpose();
        assert!((meta.as_matrix() - &plain).norm() < 1e-12 * plain.norm());
    }

    #[test]
    fn empirical_kernel_is_psd() {
        let p = small_net(32, 10);
        let batch = gen_quadratic_tasks(2, 3, 2, 61).unwrap();
        let k = empirical_meta_kernel(&p, &batch.tasks, 0.05, 2).unwrap();
        let eig = crate::linalg::sym_eig(&k).unwrap();
        let lam_max = eig.values[eig.values.len() - 1];
        assert!(eig.values[0] >= -1e-8 * lam_max);
    }

    #[test]
    fn evolution_predictor_interpolates_train_queries_at_infinite_time() {
        let p = small_net(64, 11);
        let train = gen_quadratic_tasks(2, 4, 2, 71).unwrap();
        let ec = EvolutionConfig {
            lambda: 0.002,
            tau: 2,
            eta: 0.001,
            t: Horizon::Infinite,
            ridge: 0.0,
            zero_f0: false,
        };
        for t in &train.tasks {
            let pred = analytic_meta_output(&p, t, &train.tasks, &ec).unwrap();
            assert!((pred - &t.y).norm() < 1e-6);
        }
    }

    #[test]
    fn evolution_predictor_matches_gd_training() {
        // small outer rate: linearization error is tiny at width 256
        let p = small_net(256, 12);
        let train = gen_quadratic_tasks(2, 4, 2, 81).unwrap();
        let test = gen_quadratic_tasks(1, 4, 2, 810).unwrap();
        let (lambda, tau, eta, steps) = (5e-4, 1, 2e-5, 200);
        let (trained, _) = maml_train_gd(&p, &train.tasks, eta, lambda, tau, steps).unwrap();
        let gd_pred = meta_output(&trained, &test.tasks[0], lambda, tau).unwrap();
        let ec = EvolutionConfig {
            lambda,
            tau,
            eta,
            t: Horizon::Finite(steps as f64),
            ridge: 0.0,
            zero_f0: false,
        };
        let lin_pred = analytic_meta_output(&p, &test.tasks[0], &train.tasks, &ec).unwrap();
        let err = (&gd_pred - &lin_pred).norm() / lin_pred.norm();
        assert!(err < 5e-2, "linearization mismatch {err}");
    }
}
