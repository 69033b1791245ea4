mod common;

use common::*;
use graphopt::differentiation::materialize_jacobians;
use graphopt::linear::{
    accumulate_gradient_and_diagonal, build_preconditioner, clamp_diagonal, compute_column_scaling,
    hessian_vector_product, pcg_solve, unscale_step,
};
use graphopt::{bf16, DifferentiationMode, PcgConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const MODES: [DifferentiationMode; 3] = [
    DifferentiationMode::Analytic,
    DifferentiationMode::Auto,
    DifferentiationMode::Dynamic,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matrix_free_system_matches_dense(seed in any::<u64>(), damping in 0.0f64..2.0) {
        for mode in MODES {
            let c = compare_with_dense(seed, mode, damping);
            prop_assert!(c.gradient_error <= 1e-12, "{mode:?} gradient {}", c.gradient_error);
            prop_assert!(c.diagonal_error <= 1e-12, "{mode:?} diagonal {}", c.diagonal_error);
            prop_assert!(c.hvp_error <= 1e-10, "{mode:?} hvp {}", c.hvp_error);
            prop_assert!(c.chi2_error <= 1e-12, "{mode:?} chi2 {}", c.chi2_error);
        }
    }

    /// A factor binding one vertex to two slots sums both slot contributions.
    #[test]
    fn repeated_vertex_slots_match_dense(seed in any::<u64>(), damping in 0.0f64..2.0) {
        let opts = RandomOptions { repeat_probability: 0.7, ..Default::default() };
        let problem = random_problem(seed, &opts);
        prop_assume!(problem.factors.iter().any(|f| f.vertices.len() == 2 && f.vertices[0] == f.vertices[1]));
        for mode in MODES {
            let c = compare_with_dense_using(seed, &opts, mode, damping);
            prop_assert!(c.gradient_error <= 1e-12, "{mode:?} gradient {}", c.gradient_error);
            prop_assert!(c.diagonal_error <= 1e-12, "{mode:?} diagonal {}", c.diagonal_error);
            prop_assert!(c.hvp_error <= 1e-10, "{mode:?} hvp {}", c.hvp_error);
            prop_assert!(c.chi2_error <= 1e-12, "{mode:?} chi2 {}", c.chi2_error);
            prop_assert!(c.pcg_residual <= 1e-6, "{mode:?} pcg {}", c.pcg_residual);
        }
    }

    #[test]
    fn hvp_is_symmetric_and_positive_semidefinite(seed in any::<u64>(), probe in any::<u64>()) {
        let mut problem = random_problem(seed, &RandomOptions::default());
        let built = build::<f64>(&mut problem, DifferentiationMode::Auto);
        let plan = built.graph.activate(0);
        let n = plan.total_free_dims();
        let store = materialize_jacobians(&built.graph, &plan).unwrap();
        let ones = vec![1.0; n];
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(probe);
        let u: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let hu = hessian_vector_product(&built.graph, &store, &plan, &ones, 0.0, &u);
        let hv = hessian_vector_product(&built.graph, &store, &plan, &ones, 0.0, &v);
        let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
        let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
        let scale = hu.iter().chain(&hv).map(|x| x.abs()).sum::<f64>().max(1.0);
        prop_assert!((uhv - vhu).abs() <= 1e-12 * scale);
        let vhv: f64 = v.iter().zip(&hv).map(|(a, b)| a * b).sum();
        prop_assert!(vhv >= -1e-12 * scale);
    }

    #[test]
    fn stored_and_dynamic_products_agree(seed in any::<u64>(), damping in 0.0f64..1.0) {
        let mut a = random_problem(seed, &RandomOptions::default());
        let mut b = a.clone();
        let stored = build::<f64>(&mut a, DifferentiationMode::Analytic);
        let dynamic = build::<f64>(&mut b, DifferentiationMode::Dynamic);
        let plan = stored.graph.activate(0);
        let n = plan.total_free_dims();
        let s1 = materialize_jacobians(&stored.graph, &plan).unwrap();
        let s2 = materialize_jacobians(&dynamic.graph, &dynamic.graph.activate(0)).unwrap();
        prop_assert_eq!(s2.jacobian_bytes(), 0);
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let scaling = vec![0.5; n];
        let x = hessian_vector_product(&stored.graph, &s1, &plan, &scaling, damping, &v);
        let y = hessian_vector_product(&dynamic.graph, &s2, &plan, &scaling, damping, &v);
        prop_assert!(relative_error(&y, &x) <= 1e-12);
    }

    #[test]
    fn block_jacobi_inverts_diagonal_blocks(seed in any::<u64>(), damping in 1e-6f64..1.0) {
        let mut problem = random_problem(seed, &RandomOptions::default());
        let snapshot = problem.clone();
        let built = build::<f64>(&mut problem, DifferentiationMode::Auto);
        let plan = built.graph.activate(0);
        let n = plan.total_free_dims();
        let store = materialize_jacobians(&built.graph, &plan).unwrap();
        let (_, diag) = accumulate_gradient_and_diagonal(&built.graph, &store, &plan);
        let scaling = compute_column_scaling(&clamp_diagonal(&diag, 1e-6, 1e32));
        let dense = dense_system(&snapshot, &columns_of(&plan), n, 0);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&scaling));
        let a = &d * &dense.h * &d + DMatrix::identity(n, n) * damping;
        let pre = build_preconditioner(&built.graph, &store, &plan, &scaling, damping);
        prop_assert_eq!(pre.fallback_count(), 0);
        for set in 0..3 {
            let dim = set + 1;
            let cols: Vec<usize> = plan.column_offsets(set).into_iter().flatten().collect();
            for (k, &c) in cols.iter().enumerate() {
                let inv = DMatrix::from_row_slice(dim, dim, pre.block(set, k));
                let block = a.view((c, c), (dim, dim)).into_owned();
                let err = (inv * block - DMatrix::<f64>::identity(dim, dim)).norm();
                prop_assert!(err <= 1e-10, "set {set} vertex {k}: {err}");
            }
        }
    }

    /// Scale, damp, solve with PCG, unscale: the same step as a dense solve
    /// of `(H + λ diag(H)) Δx = −b`.
    #[test]
    fn scaled_step_matches_dense_marquardt_step(seed in any::<u64>(), damping in 1e-3f64..1.0) {
        let mut problem = random_problem(seed, &RandomOptions { huber_probability: 0.0, ..Default::default() });
        let snapshot = problem.clone();
        let built = build::<f64>(&mut problem, DifferentiationMode::Analytic);
        let plan = built.graph.activate(0);
        let n = plan.total_free_dims();
        let store = materialize_jacobians(&built.graph, &plan).unwrap();
        let (b, diag) = accumulate_gradient_and_diagonal(&built.graph, &store, &plan);
        let clamped = clamp_diagonal(&diag, 1e-6, 1e32);
        let scaling = compute_column_scaling(&clamped);
        let rhs: Vec<f64> = b.iter().zip(&scaling).map(|(g, d)| -g * d).collect();
        let pre = build_preconditioner(&built.graph, &store, &plan, &scaling, damping);
        let config = PcgConfig { max_iterations: 40 * n.max(1), tolerance: 1e-13, rejection_ratio: None };
        let (xs, _) = pcg_solve::<f64, f64, _, _>(
            |p: &[f64], out: &mut [f64]| {
                out.copy_from_slice(&hessian_vector_product(&built.graph, &store, &plan, &scaling, damping, p))
            },
            &pre,
            &rhs,
            &config,
        );
        let step = unscale_step(&xs, &scaling);

        let dense = dense_system(&snapshot, &columns_of(&plan), n, 0);
        let marquardt = DMatrix::from_diagonal(&DVector::from_column_slice(&clamped)) * damping;
        let a = &dense.h + marquardt;
        let want = a.lu().solve(&(-&dense.b)).unwrap();
        prop_assert!(relative_error(&step, want.as_slice()) <= 1e-8, "{}", relative_error(&step, want.as_slice()));
    }
}

#[test]
fn narrow_storage_products_track_binary64() {
    for seed in 0..24 {
        let mut a = random_problem(seed, &RandomOptions::default());
        let mut b = a.clone();
        let mut c = a.clone();
        let wide = build::<f64>(&mut a, DifferentiationMode::Auto);
        let single = build::<f32>(&mut b, DifferentiationMode::Auto);
        let brain = build::<bf16>(&mut c, DifferentiationMode::Auto);
        let plan = wide.graph.activate(0);
        let n = plan.total_free_dims();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let ones = vec![1.0; n];
        let reference = hessian_vector_product(&wide.graph, &materialize_jacobians(&wide.graph, &plan).unwrap(), &plan, &ones, 0.1, &v);
        let s = materialize_jacobians(&single.graph, &plan).unwrap();
        let x = hessian_vector_product(&single.graph, &s, &plan, &ones, 0.1, &v);
        let h = materialize_jacobians(&brain.graph, &plan).unwrap();
        let y = hessian_vector_product(&brain.graph, &h, &plan, &ones, 0.1, &v);
        assert!(relative_error(&x, &reference) < 1e-5, "seed {seed}");
        assert!(relative_error(&y, &reference) < 5e-2, "seed {seed}");
        assert_eq!(s.jacobian_bytes(), 2 * h.jacobian_bytes());
    }
}

#[test]
fn pcg_converges_on_random_systems() {
    for seed in 0..50 {
        let c = compare_with_dense(seed, DifferentiationMode::Auto, 1e-2);
        assert!(c.pcg_residual <= 1e-6, "seed {seed}: {}", c.pcg_residual);
    }
}
