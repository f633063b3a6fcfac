//! The base learner G: kernel regression on a task's support set, and
//! how the inner horizon tau moves it from the zero function to full
//! support interpolation.
//!
//! Run with `cargo run --example inner_predictor`.

use metakernel::mnk::{inner_predictor_g, Horizon, MetaKernelConfig};
use metakernel::tasks::gen_quadratic_tasks;

fn main() {
    let batch = gen_quadratic_tasks(1, 8, 3, 42).unwrap();
    let task = &batch.tasks[0];
    println!("task alpha = {:.4}", task.alpha.unwrap());

    for tau in [
        Horizon::Finite(0.0),
        Horizon::Finite(0.5),
        Horizon::Finite(5.0),
        Horizon::Infinite,
    ] {
        let cfg = MetaKernelConfig {
            tau,
            ridge: 1e-8,
            ..MetaKernelConfig::default()
        };
        let g_sup = inner_predictor_g(task, &task.x_sup, &cfg).unwrap();
        let g_query = inner_predictor_g(task, &task.x, &cfg).unwrap();
        let sup_err = (&g_sup - &task.y_sup).norm();
        let query_err = (&g_query - &task.y).norm();
        println!(
            "tau {tau:?}: support residual {sup_err:.3e}, query residual {query_err:.3e}"
        );
    }
    println!("tau = inf interpolates the support set; query error stays finite");
    println!("because three support points cannot pin down the whole parabola.");
}
