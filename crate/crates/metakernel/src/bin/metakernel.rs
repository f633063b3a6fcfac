//! Thin CLI over the library: task generation, kernel dumps, closed-form
//! prediction and bounds, finite-width training, and the experiment
//! sweeps. All logic lives in the library; this file only parses flags
//! and forwards.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use metakernel::error::{Error, Result};
use metakernel::harness::{run_experiment, write_result, ExperimentConfig, ExperimentKind};
use metakernel::maml::{maml_train_gd, meta_output};
use metakernel::mnk::{assemble_mnk, Horizon, MetaKernelConfig};
use metakernel::net::MLPParams;
use metakernel::ntk::ntk_matrix;
use metakernel::regression::{generalization_bound, meta_predict};
use metakernel::tasks::{gen_piecewise_tasks, gen_quadratic_tasks, read_batch, write_batch};

#[derive(Parser)]
#[command(name = "metakernel", version, about = "Meta neural kernel experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct KernelArgs {
    /// Hidden layers of the idealized network.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Weight variance scale.
    #[arg(long, default_value_t = 2.0)]
    sigma_w2: f64,
    /// Bias variance.
    #[arg(long, default_value_t = 0.01)]
    sigma_b2: f64,
    /// Effective inner-loop rate.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Inner horizon ("inf" or a number).
    #[arg(long, default_value = "inf")]
    tau: String,
    /// Effective outer rate.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Outer horizon ("inf" or a number).
    #[arg(long, default_value = "inf")]
    t: String,
    /// Spectral ridge added to inversions.
    #[arg(long, default_value_t = 1e-5)]
    ridge: f64,
}

fn parse_horizon(s: &str) -> Result<Horizon> {
    if s == "inf" {
        return Ok(Horizon::Infinite);
    }
    s.parse::<f64>()
        .map(Horizon::Finite)
        .map_err(|_| Error::Validation(format!("horizon must be a number or \"inf\", got {s:?}")))
}

impl KernelArgs {
    fn to_config(&self) -> Result<MetaKernelConfig> {
        let cfg = MetaKernelConfig {
            net: metakernel::ntk::NetConfig {
                depth_l: self.depth,
                sigma_w_sq: self.sigma_w2,
                sigma_b_sq: self.sigma_b2,
                ..Default::default()
            },
            lambda_inner: self.lambda,
            tau: parse_horizon(&self.tau)?,
            eta_outer: self.eta,
            t_outer: parse_horizon(&self.t)?,
            ridge: self.ridge,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n_tasks: Option<usize>,
}

impl SweepArgs {
    fn to_config(&self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_toml_file(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.experiment = kind;
        if let Some(o) = &self.output {
            cfg.output_path = o.display().to_string();
        }
        if let Some(v) = &self.sweep_values {
            cfg.sweep_values = v.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(w) = self.width {
            cfg.train.width = w;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(n) = self.n_tasks {
            cfg.tasks.n_tasks = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task batch to a JSONL file.
    GenTasks {
        #[arg(long, value_enum, default_value = "quadratic")]
        kind: CliTaskKind,
        #[arg(long, default_value_t = 40)]
        n_tasks: usize,
        #[arg(long, default_value_t = 8)]
        n_query: usize,
        #[arg(long, default_value_t = 2)]
        m_support: usize,
        #[arg(long, default_value_t = 5)]
        pieces: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic NTK Gram over the stacked query points of a task file.
    Ntk {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Assembled train/train meta-kernel matrix of a task file.
    Mnk {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Closed-form meta predictions for test tasks given training tasks.
    Predict {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Generalization bound of a training task file (JSON to stdout).
    Bound {
        #[arg(long)]
        tasks: PathBuf,
        #[command(flatten)]
        kernel: KernelArgs,
    },
    /// Finite-width MAML training; writes a step/loss/drift trace CSV.
    MamlTrain {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        width: usize,
        /// Effective inner rate (raw rate is this over width).
        #[arg(long, default_value_t = 0.05)]
        lambda_eff: f64,
        #[arg(long, default_value_t = 5)]
        tau: usize,
        /// Effective outer rate (raw rate is this over width).
        #[arg(long, default_value_t = 0.01)]
        eta_eff: f64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        depth: usize,
    },
    /// Bound vs MAML test error over label-noise levels.
    NoiseSweep(SweepArgs),
    /// Empirical-vs-analytic kernel error over widths.
    WidthSweep(SweepArgs),
    /// Pairwise predictor comparison on held-out tasks.
    Compare(SweepArgs),
    /// Grid table of truth/base/meta/PFG for one test task.
    Decompose(SweepArgs),
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliTaskKind {
    Quadratic,
    Piecewise,
}

fn write_matrix_csv(m: &DMatrix<f64>, path: &PathBuf) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..m.nrows() {
        let rec: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks {
            kind,
            n_tasks,
            n_query,
            m_support,
            pieces,
            seed,
            out,
        } => {
            let batch = match kind {
                CliTaskKind::Quadratic => gen_quadratic_tasks(n_tasks, n_query, m_support, seed)?,
                CliTaskKind::Piecewise => {
                    gen_piecewise_tasks(n_tasks, n_query, m_support, pieces, seed)?
                }
            };
            write_batch(&batch, &out)?;
            println!("wrote {} tasks to {}", batch.tasks.len(), out.display());
        }
        Command::Ntk { tasks, out, kernel } => {
            let cfg = kernel.to_config()?;
            let batch = read_batch(&tasks)?;
            let rows: usize = batch.tasks.iter().map(|t| t.n_query()).sum();
            let d = batch.tasks[0].x.ncols();
            let mut x = DMatrix::zeros(rows, d);
            let mut pos = 0;
            for t in &batch.tasks {
                x.rows_mut(pos, t.n_query()).copy_from(&t.x);
                pos += t.n_query();
            }
            let k = ntk_matrix(&x, &x, &cfg.net)?;
            write_matrix_csv(&k.theta, &out)?;
            println!("wrote {rows}x{rows} NTK matrix to {}", out.display());
        }
        Command::Mnk { tasks, out, kernel } => {
            let cfg = kernel.to_config()?;
            let batch = read_batch(&tasks)?;
            let m = assemble_mnk(&batch.tasks, &batch.tasks, &cfg)?;
            write_matrix_csv(&m.phi, &out)?;
            println!(
                "wrote {}x{} meta-kernel matrix to {}",
                m.phi.nrows(),
                m.phi.ncols(),
                out.display()
            );
        }
        Command::Predict {
            train,
            test,
            out,
            kernel,
        } => {
            let cfg = kernel.to_config()?;
            let train = read_batch(&train)?;
            let test = read_batch(&test)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["task", "sample", "x", "y", "base", "meta", "pfg"])?;
            for (ti, task) in test.tasks.iter().enumerate() {
                let pred = meta_predict(task, &train.tasks, &cfg)?;
                for s in 0..task.n_query() {
                    w.write_record([
                        ti.to_string(),
                        s.to_string(),
                        format!("{}", task.x[(s, 0)]),
                        format!("{}", task.y[(s, 0)]),
                        format!("{}", pred.base_learner[(s, 0)]),
                        format!("{}", pred.values[(s, 0)]),
                        format!("{}", pred.pfg[(s, 0)]),
                    ])?;
                }
            }
            w.flush()?;
            println!("wrote predictions for {} tasks to {}", test.tasks.len(), out.display());
        }
        Command::Bound { tasks, kernel } => {
            let cfg = kernel.to_config()?;
            let batch = read_batch(&tasks)?;
            let rep = generalization_bound(&batch.tasks, &cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "bound": rep.bound,
                    "normalized_bound": rep.normalized_bound,
                    "min_eig_phi": rep.min_eig_phi,
                    "n_tasks": batch.tasks.len(),
                })
            );
        }
        Command::MamlTrain {
            tasks,
            out,
            checkpoint,
            width,
            lambda_eff,
            tau,
            eta_eff,
            steps,
            seed,
            depth,
        } => {
            let batch = read_batch(&tasks)?;
            let net = metakernel::ntk::NetConfig {
                depth_l: depth,
                ..Default::default()
            };
            let (d, k) = batch.tasks[0].dims();
            let params0 = MLPParams::init(&net, width, d, k, seed)?;
            let (lambda, eta) = (lambda_eff / width as f64, eta_eff / width as f64);
            let (trained, trace) =
                maml_train_gd(&params0, &batch.tasks, eta, lambda, tau, steps)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["step", "loss", "param_drift"])?;
            for (i, (l, dft)) in trace.losses.iter().zip(&trace.param_drift).enumerate() {
                w.write_record([i.to_string(), format!("{l}"), format!("{dft}")])?;
            }
            w.flush()?;
            if let Some(cp) = checkpoint {
                trained.save_checkpoint(&cp)?;
            }
            let mut final_loss = 0.0;
            for t in &batch.tasks {
                let o = meta_output(&trained, t, lambda, tau)?;
                final_loss += 0.5 * (o - &t.y).norm_squared();
            }
            println!("final training loss {final_loss:.6e}; trace in {}", out.display());
        }
        Command::NoiseSweep(a) => sweep(a, ExperimentKind::NoiseSweep)?,
        Command::WidthSweep(a) => sweep(a, ExperimentKind::WidthSweep)?,
        Command::Compare(a) => sweep(a, ExperimentKind::Compare)?,
        Command::Decompose(a) => sweep(a, ExperimentKind::Decompose)?,
    }
    Ok(())
}

fn sweep(args: SweepArgs, kind: ExperimentKind) -> Result<()> {
    let cfg = args.to_config(kind)?;
    let result = run_experiment(&cfg)?;
    let path = PathBuf::from(&cfg.output_path);
    write_result(&result, &path)?;
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "wrote {} rows ({} failed cells) to {}",
        result.rows.len(),
        failed,
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
