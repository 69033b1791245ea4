//! The same bundle-adjustment problem at binary64, binary32 and binary32 with
//! bfloat16 linear-system storage: final MSE against Jacobian memory.
//!
//!     cargo run --release --example mixed_precision

use graphopt::bal::{build_bal_graph, generate_synthetic_bal, SyntheticBalConfig};
use graphopt::{bf16, levenberg_marquardt, DifferentiationMode, LmConfig, Real, SolveReport, Storage};

fn solve<G: Real, S: Storage<G>>(cfg: &SyntheticBalConfig) -> (f64, f64, SolveReport) {
    let mut problem = generate_synthetic_bal(cfg).convert::<G>();
    let mut bal = build_bal_graph::<G, S>(&mut problem, DifferentiationMode::Analytic, None).unwrap();
    let initial = bal.mse();
    let mut config = LmConfig {
        max_iterations: 50,
        ..Default::default()
    };
    config.pcg.max_iterations = 10;
    let report = levenberg_marquardt(&mut bal.graph, &config).unwrap();
    (initial, bal.mse(), report)
}

fn main() {
    let cfg = SyntheticBalConfig {
        num_cameras: 16,
        num_points: 2000,
        views_per_point: 4,
        ..Default::default()
    };
    println!("precision        MSE initial -> final   iterations  jacobian bytes  total bytes");
    let runs = [
        ("binary64/64", solve::<f64, f64>(&cfg)),
        ("binary32/32", solve::<f32, f32>(&cfg)),
        ("binary32/bf16", solve::<f32, bf16>(&cfg)),
    ];
    for (name, (initial, last, r)) in &runs {
        println!(
            "{name:<15}  {initial:>9.4} -> {last:<9.4}  {:>10}  {:>14}  {:>11}",
            r.summary.iterations,
            r.memory_account.jacobian_bytes,
            r.memory_account.total()
        );
    }
}
