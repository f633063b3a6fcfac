//! Convergence of the empirical meta kernel to the analytic one as the
//! hidden width grows.
//!
//! The network trains in the scaled parameter chart, so the quoted
//! effective inner rate `lambda_eff` corresponds to a raw per-step rate
//! `lambda_eff / width`; the analytic side then uses
//! `lambda_inner = lambda_eff` over `tau` unit time steps.
//!
//! Run with `cargo run --release --example kernel_convergence`.

use metakernel::maml::empirical_meta_kernel;
use metakernel::mnk::{assemble_mnk, Horizon, MetaKernelConfig};
use metakernel::net::MLPParams;
use metakernel::tasks::gen_quadratic_tasks;

fn main() {
    let batch = gen_quadratic_tasks(3, 6, 2, 7).unwrap();
    let (lambda_eff, tau) = (0.05, 3);

    let cfg = MetaKernelConfig {
        lambda_inner: lambda_eff,
        tau: Horizon::Finite(tau as f64),
        ..MetaKernelConfig::default()
    };
    let phi = assemble_mnk(&batch.tasks, &batch.tasks, &cfg).unwrap().phi;

    for width in [32, 128, 512] {
        let mut errs: Vec<f64> = (0..3)
            .map(|seed| {
                let params = MLPParams::init(&cfg.net, width, 1, 1, 90 + seed).unwrap();
                let phi_hat = empirical_meta_kernel(
                    &params,
                    &batch.tasks,
                    lambda_eff / width as f64,
                    tau,
                )
                .unwrap();
                (phi_hat.as_matrix() - &phi).norm() / phi.norm()
            })
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("width {width:>4}: median relative kernel error {:.4}", errs[1]);
    }
    println!("the error shrinks roughly like 1/sqrt(width)");
}
