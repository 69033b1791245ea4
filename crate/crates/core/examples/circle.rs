//! Fit 50 noisy points to a circle of radius 5 and print the LM trace.
//!
//!     cargo run --release --example circle

use graphopt::circle::{build_circle_graph, generate_circle_problem};
use graphopt::{levenberg_marquardt, DifferentiationMode, LmConfig};

fn main() {
    let mut problem = generate_circle_problem::<f64>(50, 5.0, 0.1, 42);
    let report = {
        let mut circle =
            build_circle_graph::<f64, f64>(&mut problem, DifferentiationMode::Auto, Default::default()).unwrap();
        levenberg_marquardt(&mut circle.graph, &LmConfig::default()).unwrap()
    };

    println!("iter  chi2_before    chi2_after     damping    gain      pcg  accepted");
    for it in &report.iterations {
        println!(
            "{:>4}  {:<13.6e}  {:<13.6e}  {:<9.2e}  {:>8.3}  {:>3}  {}",
            it.iteration, it.chi2_before, it.chi2_after, it.damping, it.gain_ratio, it.pcg_iterations, it.accepted
        );
    }
    let s = &report.summary;
    println!(
        "chi2 {:.4} -> {:.4} ({:?} after {} iterations)",
        s.initial_chi2, s.final_chi2, s.termination, s.iterations
    );

    // the graph borrowed the points; they now hold the refined values
    let worst = problem
        .points
        .iter()
        .map(|p| ((p[0] * p[0] + p[1] * p[1]).sqrt() - 5.0).abs())
        .fold(0.0, f64::max);
    println!("largest distance from the circle: {worst:.2e}");
}
