//! Functional-gradient decomposition of the meta predictor on a dense
//! grid: meta = base - pfg, and meta tracks the ground truth much more
//! closely than the base learner.
//!
//! Run with `cargo run --example decompose_demo`.

use metakernel::harness::{run_decompose, ExperimentConfig, ExperimentKind};

fn main() {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Decompose,
        seeds: vec![2],
        grid_points: 21,
        ..ExperimentConfig::default()
    };
    let res = run_decompose(&cfg).unwrap();

    println!("{:>6} {:>9} {:>9} {:>9} {:>9}", "x", "truth", "base", "meta", "pfg");
    let mut base_err = 0.0;
    let mut meta_err = 0.0;
    for row in &res.rows {
        let (t, b, m, p) = (
            row.aux["truth"],
            row.aux["base"],
            row.aux["meta"],
            row.aux["pfg"],
        );
        println!("{:>6.3} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", row.sweep_value, t, b, m, p);
        base_err += (b - t).abs();
        meta_err += (m - t).abs();
        assert!((m - b + p).abs() < 1e-10);
    }
    let n = res.rows.len() as f64;
    println!(
        "mean |base - truth| = {:.4}, mean |meta - truth| = {:.4}",
        base_err / n,
        meta_err / n
    );
}
