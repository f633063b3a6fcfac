//! Experiment pipelines: noise sweep, width-convergence sweep, predictor
//! comparison and the functional-gradient decomposition table, plus the
//! CSV/JSON result writer shared by all of them.
//!
//! Every pipeline is a deterministic function of its configuration: the
//! CSV output reproduces byte-for-byte across reruns; only the JSON
//! sidecar carries a timestamp. Failed sweep cells record their error in
//! the `error` column instead of aborting the run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maml::{
    analytic_meta_output, empirical_meta_kernel, maml_train_gd, meta_output, EvolutionConfig,
};
use crate::mnk::{assemble_mnk, Horizon, MetaKernelConfig};
use crate::net::MLPParams;
use crate::regression::{generalization_bound, meta_predict, test_loss};
use crate::tasks::{add_label_noise, gen_piecewise_tasks, gen_quadratic_tasks, TaskBatch, TaskData, TaskKind};

/// Environment variable that caps worker threads. Sweep cells are
/// independent, so a parallel runner may honor it; the built-in runner
/// is sequential and records the value in provenance only.
pub const THREADS_ENV: &str = "METAKERNEL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    NoiseSweep,
    WidthSweep,
    Compare,
    Decompose,
}

/// Task-generator arguments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub kind: TaskKind,
    pub n_tasks: usize,
    pub n_query: usize,
    pub m_support: usize,
    /// Piecewise generator only.
    pub pieces: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig {
            kind: TaskKind::Quadratic,
            n_tasks: crate::tasks::DEFAULT_N_TASKS,
            n_query: crate::tasks::DEFAULT_N_QUERY,
            m_support: crate::tasks::DEFAULT_M_SUPPORT,
            pieces: 5,
        }
    }
}

/// Finite-width training settings.
///
/// Rates are quoted as effective function-space rates: the raw per-step
/// rate used at width `w` is `*_eff / w`, which keeps the induced
/// function dynamics width-independent and matches the analytic kernel
/// configuration `lambda_inner = lambda_eff`, `tau = tau` directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub width: usize,
    pub lambda_eff: f64,
    /// Discrete inner steps.
    pub tau: usize,
    pub eta_eff: f64,
    /// Outer gradient-descent steps.
    pub steps: usize,
    pub n_test_tasks: usize,
    /// Subtract the frozen initialization outputs from the model, which
    /// removes the O(1) random init function and makes the finite-width
    /// predictor comparable to the deterministic kernel predictors.
    pub center_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width: 512,
            lambda_eff: 0.05,
            tau: 5,
            eta_eff: 0.01,
            steps: 2000,
            n_test_tasks: 40,
            center_init: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub kernel: MetaKernelConfig,
    pub tasks: TaskGenConfig,
    pub train: TrainConfig,
    pub sweep_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_path: String,
    /// Decompose pipeline grid resolution on [0, 1].
    pub grid_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::NoiseSweep,
            kernel: MetaKernelConfig::default(),
            tasks: TaskGenConfig::default(),
            train: TrainConfig::default(),
            sweep_values: vec![0.0, 0.05, 0.1, 0.2, 0.4],
            seeds: vec![0, 1, 2, 3, 4],
            output_path: "results.csv".into(),
            grid_points: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.sweep_values.is_empty() {
            return Err(Error::Validation("sweep_values must be nonempty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must be nonempty".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Validation("grid_points must be >= 2".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Validation(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON serialization of the effective
    /// (defaults-materialized) configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// One sweep cell. Metric columns are `NaN` when not applicable to the
/// pipeline and serialize as empty CSV fields.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub sweep_value: f64,
    pub seed: u64,
    pub bound: f64,
    pub normalized_bound: f64,
    pub kernel_test_loss: f64,
    pub maml_test_loss: f64,
    pub aux: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl ResultRow {
    fn empty(sweep_value: f64, seed: u64) -> Self {
        ResultRow {
            sweep_value,
            seed,
            bound: f64::NAN,
            normalized_bound: f64::NAN,
            kernel_test_loss: f64::NAN,
            maml_test_loss: f64::NAN,
            aux: BTreeMap::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
    pub timestamp_unix: u64,
    pub threads: Option<String>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub provenance: Provenance,
}

fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        threads: std::env::var(THREADS_ENV).ok(),
        config: cfg.clone(),
    }
}

fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn gen_batch(tc: &TaskGenConfig, n_tasks: usize, seed: u64) -> Result<TaskBatch> {
    match tc.kind {
        TaskKind::Quadratic => gen_quadratic_tasks(n_tasks, tc.n_query, tc.m_support, seed),
        TaskKind::Piecewise => {
            gen_piecewise_tasks(n_tasks, tc.n_query, tc.m_support, tc.pieces, seed)
        }
    }
}

/// Shift every label by the frozen init's plain forward outputs, turning
/// training on the shifted tasks into training of the centered model
/// `g = f - f_init` on the original labels. The centered model starts at
/// the zero function, so its predictions are directly comparable to the
/// deterministic kernel predictors.
fn center_tasks(params0: &MLPParams, tasks: &[TaskData]) -> Result<Vec<TaskData>> {
    tasks
        .iter()
        .map(|t| {
            let mut t2 = t.clone();
            t2.y += params0.forward(&t.x)?;
            t2.y_sup += params0.forward(&t.x_sup)?;
            Ok(t2)
        })
        .collect()
}

/// Centered-model meta prediction: adapt on the shifted support labels
/// and subtract the frozen init outputs on the query points.
fn centered_meta_output(
    params: &MLPParams,
    params0: &MLPParams,
    task_shifted: &TaskData,
    lambda: f64,
    tau: usize,
) -> Result<DMatrix<f64>> {
    let out = meta_output(params, task_shifted, lambda, tau)?;
    Ok(out - params0.forward(&task_shifted.x)?)
}

/// Mean per-sample squared-error loss of a predictor over tasks.
fn mean_loss(preds: &[DMatrix<f64>], tasks: &[TaskData]) -> Result<f64> {
    let mut acc = 0.0;
    for (p, t) in preds.iter().zip(tasks) {
        acc += test_loss(p, &t.y)? / (t.n_query() as f64);
    }
    Ok(acc / tasks.len() as f64)
}

/// Analytic kernel config matched to the discrete training schedule.
fn matched_kernel(cfg: &ExperimentConfig) -> MetaKernelConfig {
    MetaKernelConfig {
        lambda_inner: cfg.train.lambda_eff,
        tau: Horizon::Finite(cfg.train.tau as f64),
        eta_outer: cfg.train.eta_eff,
        t_outer: Horizon::Finite(cfg.train.steps as f64),
        ..cfg.kernel
    }
}

fn run_cells(
    cfg: &ExperimentConfig,
    mut cell: impl FnMut(f64, u64, &mut ResultRow) -> Result<()>,
) -> ExperimentResult {
    let mut rows = Vec::with_capacity(cfg.sweep_values.len() * cfg.seeds.len());
    for &v in &cfg.sweep_values {
        for &seed in &cfg.seeds {
            let mut row = ResultRow::empty(v, seed);
            if let Err(e) = cell(v, seed, &mut row) {
                row.error = Some(format!("sweep_value {v}, seed {seed}: {e}"));
            }
            rows.push(row);
        }
    }
    ExperimentResult {
        rows,
        provenance: provenance(cfg),
    }
}

/// Bound vs MAML test error across label-noise levels.
///
/// The noise stream is keyed by the seed only, so all noise levels of
/// one seed scale the same Gaussian realization; the noise effect is
/// then monotone within a seed, not just in the median.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let tr = &cfg.train;
    Ok(run_cells(cfg, |xi, seed, row| {
        let clean = gen_batch(&cfg.tasks, cfg.tasks.n_tasks, seed)?;
        let noisy = add_label_noise(&clean, xi, derived_seed(seed, 1))?;
        let test_clean = gen_batch(&cfg.tasks, tr.n_test_tasks, derived_seed(seed, 2))?;
        let test_noisy = add_label_noise(&test_clean, xi, derived_seed(seed, 3))?;

        let rep = generalization_bound(&noisy.tasks, &cfg.kernel)?;
        row.bound = rep.bound;
        row.normalized_bound = rep.normalized_bound;
        row.aux.insert("min_eig_phi".into(), rep.min_eig_phi);

        let kernel_preds: Vec<DMatrix<f64>> = test_noisy
            .tasks
            .iter()
            .map(|t| meta_predict(t, &noisy.tasks, &cfg.kernel).map(|p| p.values))
            .collect::<Result<_>>()?;
        row.kernel_test_loss = mean_loss(&kernel_preds, &test_noisy.tasks)?;

        let params0 = MLPParams::init(&cfg.kernel.net, tr.width, 1, 1, derived_seed(seed, 4))?;
        let (lambda, eta) = (
            tr.lambda_eff / tr.width as f64,
            tr.eta_eff / tr.width as f64,
        );
        let train_tasks = if tr.center_init {
            center_tasks(&params0, &noisy.tasks)?
        } else {
            noisy.tasks.clone()
        };
        let (trained, trace) =
            maml_train_gd(&params0, &train_tasks, eta, lambda, tr.tau, tr.steps)?;
        row.aux
            .insert("final_train_loss".into(), *trace.losses.last().unwrap());
        let test_tasks = if tr.center_init {
            center_tasks(&params0, &test_noisy.tasks)?
        } else {
            test_noisy.tasks.clone()
        };
        let maml_preds: Vec<DMatrix<f64>> = test_tasks
            .iter()
            .map(|t| {
                if tr.center_init {
                    centered_meta_output(&trained, &params0, t, lambda, tr.tau)
                } else {
                    meta_output(&trained, t, lambda, tr.tau)
                }
            })
            .collect::<Result<_>>()?;
        row.maml_test_loss = mean_loss(&maml_preds, &test_noisy.tasks)?;
        Ok(())
    }))
}

/// Empirical-vs-analytic kernel error and training drifts across widths.
///
/// `sweep_values` are hidden widths. Kernel drift is probed on the first
/// `drift_probe_tasks` tasks to bound the Jacobian memory at large
/// widths.
pub fn run_width_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let tr = &cfg.train;
    let kernel_cfg = matched_kernel(cfg);
    Ok(run_cells(cfg, |wv, seed, row| {
        let width = wv as usize;
        if width < 1 || (wv - width as f64).abs() > 0.0 {
            return Err(Error::Validation(format!("width must be a positive integer, got {wv}")));
        }
        let batch = gen_batch(&cfg.tasks, cfg.tasks.n_tasks, seed)?;
        let (lambda, eta) = (tr.lambda_eff / width as f64, tr.eta_eff / width as f64);
        let params0 = MLPParams::init(&cfg.kernel.net, width, 1, 1, derived_seed(seed, 4))?;

        let phi_hat = empirical_meta_kernel(&params0, &batch.tasks, lambda, tr.tau)?;
        let phi = assemble_mnk(&batch.tasks, &batch.tasks, &kernel_cfg)?;
        let diff = phi_hat.as_matrix() - &phi.phi;
        row.aux
            .insert("kernel_err".into(), diff.norm() / phi.phi.norm());

        let probe: Vec<TaskData> = batch.tasks.iter().take(2).cloned().collect();
        let k0 = empirical_meta_kernel(&params0, &probe, lambda, tr.tau)?;
        let (trained, trace) =
            maml_train_gd(&params0, &batch.tasks, eta, lambda, tr.tau, tr.steps)?;
        let kt = empirical_meta_kernel(&trained, &probe, lambda, tr.tau)?;
        row.aux.insert(
            "kernel_drift".into(),
            (kt.as_matrix() - k0.as_matrix()).norm() / k0.as_matrix().norm(),
        );
        row.aux.insert(
            "param_drift".into(),
            *trace.param_drift.last().unwrap(),
        );
        row.aux
            .insert("final_train_loss".into(), *trace.losses.last().unwrap());
        Ok(())
    }))
}

/// Pairwise comparison of trained finite-width MAML, its linearized
/// evolution (empirical kernel) and the analytic meta-kernel predictor
/// on held-out test tasks. One row per seed; `sweep_values` must be a
/// single width.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let tr = &cfg.train;
    let kernel_cfg = matched_kernel(cfg);
    Ok(run_cells(cfg, |wv, seed, row| {
        let width = wv as usize;
        let train = gen_batch(&cfg.tasks, cfg.tasks.n_tasks, seed)?;
        let test = gen_batch(&cfg.tasks, tr.n_test_tasks, derived_seed(seed, 2))?;
        let (lambda, eta) = (tr.lambda_eff / width as f64, tr.eta_eff / width as f64);
        let params0 = MLPParams::init(&cfg.kernel.net, width, 1, 1, derived_seed(seed, 4))?;
        let train_tasks = if tr.center_init {
            center_tasks(&params0, &train.tasks)?
        } else {
            train.tasks.clone()
        };

        let (trained, trace) =
            maml_train_gd(&params0, &train_tasks, eta, lambda, tr.tau, tr.steps)?;
        row.aux
            .insert("final_train_loss".into(), *trace.losses.last().unwrap());

        let ec = EvolutionConfig {
            lambda,
            tau: tr.tau,
            eta,
            t: Horizon::Finite(tr.steps as f64),
            ridge: cfg.kernel.ridge,
            zero_f0: false,
        };
        let test_tasks = if tr.center_init {
            center_tasks(&params0, &test.tasks)?
        } else {
            test.tasks.clone()
        };
        let mut maml = Vec::new();
        let mut cor1 = Vec::new();
        let mut mnk = Vec::new();
        for (t_eval, t_orig) in test_tasks.iter().zip(&test.tasks) {
            if tr.center_init {
                maml.push(centered_meta_output(&trained, &params0, t_eval, lambda, tr.tau)?);
                // the linearized predictor sees the same shifted tasks as
                // training; subtracting the frozen init recenters it
                let lin = analytic_meta_output(&params0, t_eval, &train_tasks, &ec)?;
                cor1.push(lin - params0.forward(&t_eval.x)?);
            } else {
                maml.push(meta_output(&trained, t_eval, lambda, tr.tau)?);
                cor1.push(analytic_meta_output(&params0, t_eval, &train_tasks, &ec)?);
            }
            mnk.push(meta_predict(t_orig, &train.tasks, &kernel_cfg)?.values);
        }
        let rmse = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| -> f64 {
            let (mut acc, mut cnt) = (0.0, 0);
            for (x, y) in a.iter().zip(b) {
                acc += (x - y).norm_squared();
                cnt += x.len();
            }
            (acc / cnt as f64).sqrt()
        };
        let zeros: Vec<DMatrix<f64>> = maml
            .iter()
            .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
            .collect();
        row.aux.insert("rmse_maml_mnk".into(), rmse(&maml, &mnk));
        row.aux.insert("rmse_maml_cor1".into(), rmse(&maml, &cor1));
        row.aux.insert("rmse_cor1_mnk".into(), rmse(&cor1, &mnk));
        row.aux.insert("rmse_maml_zero".into(), rmse(&maml, &zeros));
        row.kernel_test_loss = mean_loss(&mnk, &test.tasks)?;
        row.maml_test_loss = mean_loss(&maml, &test.tasks)?;
        Ok(())
    }))
}

/// Dense-grid table of ground truth, base learner, meta learner and PFG
/// for one held-out quadratic test task. Rows are grid points:
/// `sweep_value` is the grid coordinate and the curves live in the aux
/// columns `{truth, base, meta, pfg}`.
pub fn run_decompose(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let train = gen_batch(&cfg.tasks, cfg.tasks.n_tasks, seed)?;
    let test = gen_batch(&cfg.tasks, 1, derived_seed(seed, 2))?;
    let task = &test.tasks[0];
    let alpha = task.alpha.ok_or_else(|| {
        Error::Validation("decompose needs a quadratic test task with alpha".into())
    })?;

    let g = cfg.grid_points;
    let grid = DMatrix::from_fn(g, 1, |i, _| i as f64 / (g - 1) as f64);
    let truth = grid.map(|x| alpha * x * x);
    let grid_task = TaskData {
        x: grid.clone(),
        y: truth.clone(),
        x_sup: task.x_sup.clone(),
        y_sup: task.y_sup.clone(),
        alpha: task.alpha,
    };
    let pred = meta_predict(&grid_task, &train.tasks, &cfg.kernel)?;

    let mut rows = Vec::with_capacity(g);
    for i in 0..g {
        let mut row = ResultRow::empty(grid[(i, 0)], seed);
        row.aux.insert("truth".into(), truth[(i, 0)]);
        row.aux.insert("base".into(), pred.base_learner[(i, 0)]);
        row.aux.insert("meta".into(), pred.values[(i, 0)]);
        row.aux.insert("pfg".into(), pred.pfg[(i, 0)]);
        rows.push(row);
    }
    Ok(ExperimentResult {
        rows,
        provenance: provenance(cfg),
    })
}

/// Dispatch on the configured experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    match cfg.experiment {
        ExperimentKind::NoiseSweep => run_noise_sweep(cfg),
        ExperimentKind::WidthSweep => run_width_sweep(cfg),
        ExperimentKind::Compare => run_compare(cfg),
        ExperimentKind::Decompose => run_decompose(cfg),
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Write the result as CSV plus a JSON provenance sidecar (same path
/// with a `.json` extension). The CSV is timestamp-free and reproduces
/// byte-for-byte across reruns of the same config.
pub fn write_result(result: &ExperimentResult, path: &Path) -> Result<()> {
    let mut aux_keys: Vec<String> = Vec::new();
    for row in &result.rows {
        for k in row.aux.keys() {
            if !aux_keys.contains(k) {
                aux_keys.push(k.clone());
            }
        }
    }
    aux_keys.sort();

    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "sweep_value".to_string(),
        "seed".to_string(),
        "bound".to_string(),
        "normalized_bound".to_string(),
        "kernel_test_loss".to_string(),
        "maml_test_loss".to_string(),
    ];
    header.extend(aux_keys.iter().cloned());
    header.push("error".to_string());
    w.write_record(&header)?;
    for row in &result.rows {
        let mut rec = vec![
            format!("{}", row.sweep_value),
            format!("{}", row.seed),
            fmt_metric(row.bound),
            fmt_metric(row.normalized_bound),
            fmt_metric(row.kernel_test_loss),
            fmt_metric(row.maml_test_loss),
        ];
        for k in &aux_keys {
            rec.push(row.aux.get(k).copied().map(fmt_metric).unwrap_or_default());
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let sidecar = path.with_extension("json");
    let mut f = std::fs::File::create(sidecar)?;
    let body = serde_json::to_string_pretty(&result.provenance)
        .map_err(|e| Error::Validation(format!("provenance serialization: {e}")))?;
    f.write_all(body.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Median of a slice (NaNs excluded); NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Spearman rank correlation of two equal-length samples.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        let (x, y) = (ra[i] - mean, rb[i] - mean);
        num += x * y;
        da += x * x;
        db += y * y;
    }
    num / (da.sqrt() * db.sqrt())
}
