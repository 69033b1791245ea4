//! One damped Gauss-Newton step assembled by hand from the linear-algebra
//! building blocks, with a binary32 PCG workspace.
//!
//!     cargo run --release --example matrix_free

use graphopt::circle::{build_circle_graph, generate_circle_problem};
use graphopt::differentiation::materialize_jacobians;
use graphopt::linear::{
    accumulate_gradient_and_diagonal, build_preconditioner, clamp_diagonal, compute_column_scaling,
    hessian_vector_product, pcg_solve, unscale_step,
};
use graphopt::{DifferentiationMode, PcgConfig};

fn main() {
    let mut problem = generate_circle_problem::<f64>(200, 5.0, 0.1, 7);
    let mut circle = build_circle_graph::<f64, f64>(&mut problem, DifferentiationMode::Analytic, Default::default()).unwrap();
    let graph = &mut circle.graph;
    let plan = graph.activate(0);
    let before = graph.total_error(0);

    let jacobians = materialize_jacobians(graph, &plan).expect("finite linearisation");
    let (b, diag) = accumulate_gradient_and_diagonal(graph, &jacobians, &plan);
    let scaling = compute_column_scaling(&clamp_diagonal(&diag, 1e-6, 1e32));
    let rhs: Vec<f64> = b.iter().zip(&scaling).map(|(g, d)| -g * d).collect();

    // raise λ until the step decreases chi2
    for damping in [1e-3, 1e-1, 1e1, 1e3] {
        let preconditioner = build_preconditioner(graph, &jacobians, &plan, &scaling, damping);

        // PCG vectors live in binary32; products and dot products stay at binary64
        let operator = |p: &[f32], out: &mut [f32]| {
            let wide: Vec<f64> = p.iter().map(|&x| x as f64).collect();
            let hv = hessian_vector_product(graph, &jacobians, &plan, &scaling, damping, &wide);
            for (o, v) in out.iter_mut().zip(hv) {
                *o = v as f32;
            }
        };
        let (scaled_step, stats) = pcg_solve::<f64, f32, _, _>(operator, &preconditioner, &rhs, &PcgConfig::default());

        let step = unscale_step(&scaled_step, &scaling);
        let snapshot = graph.take_snapshot(&plan);
        graph.apply_update(&plan, &step);
        let after = graph.total_error(0);
        println!(
            "lambda {damping:.0e}: PCG {} iterations (residual {:.1e}), chi2 {before:.4} -> {after:.4}",
            stats.iterations, stats.final_relative_residual
        );
        if after < before {
            println!("accepted");
            return;
        }
        graph.restore_snapshot(&snapshot);
        assert_eq!(graph.total_error(0), before);
        println!("rejected, parameters restored");
    }
}
