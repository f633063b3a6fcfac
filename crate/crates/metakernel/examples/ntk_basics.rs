//! Analytic NTK values for a small 1-d grid: how depth and the bias
//! variance shape the kernel.
//!
//! Run with `cargo run --example ntk_basics`.

use metakernel::ntk::{ntk_matrix, NetConfig};
use nalgebra::DMatrix;

fn main() {
    let x = DMatrix::from_fn(5, 1, |i, _| i as f64 / 4.0);

    for depth in [1, 2, 4] {
        let cfg = NetConfig {
            depth_l: depth,
            ..NetConfig::default()
        };
        let k = ntk_matrix(&x, &x, &cfg).unwrap();
        println!("depth {depth}:");
        println!("  theta diagonal: {:?}", k.theta.diagonal().as_slice());
        println!(
            "  theta(0, 1) / sqrt(theta(0,0) theta(1,1)) = {:.4}",
            k.theta[(0, 4)] / (k.theta[(0, 0)] * k.theta[(4, 4)]).sqrt()
        );
        println!("  nngp diagonal:  {:?}", k.nngp.diagonal().as_slice());
    }
}
