use graphopt::bal::SyntheticBalConfig;
use graphopt::experiment::{run_experiment, ExperimentConfig, ExperimentReport, PrecisionMode, ProblemSpec};
use graphopt::{DifferentiationMode, MemoryAccount};
use proptest::prelude::*;

fn run(cfg: &SyntheticBalConfig, precision: PrecisionMode, mode: DifferentiationMode) -> ExperimentReport {
    let mut config = ExperimentConfig::new(ProblemSpec::synthetic_bal(cfg));
    config.precision = precision;
    config.diff_mode = mode;
    config.lm.max_iterations = 2;
    run_experiment(&config).unwrap()
}

/// Every field from element counts: 9-scalar cameras, 3-scalar points,
/// 2-row residuals, one `u8` placeholder per factor.
fn expected(cameras: usize, points: usize, obs: usize, g: usize, s: usize, stored: bool) -> MemoryAccount {
    let n = 9 * cameras + 3 * points;
    let blocks = 81 * cameras + 9 * points;
    MemoryAccount {
        jacobian_bytes: if stored { obs * 2 * 12 * s } else { 0 },
        preconditioner_bytes: blocks * g,
        workspace_bytes: 5 * n * s,
        linear_state_bytes: g * (7 * n + obs * 12 + blocks + 2 * obs + obs + n),
        graph_bytes: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn accounts_follow_element_counts(cameras in 2usize..6, points in 5usize..40, views in 2usize..4, seed in any::<u64>()) {
        let cfg = SyntheticBalConfig { num_cameras: cameras, num_points: points, views_per_point: views, seed, ..Default::default() };
        let obs = points * views.min(cameras);
        let cases = [
            (PrecisionMode::Fp64, DifferentiationMode::Analytic, 8, 8, true),
            (PrecisionMode::Fp32, DifferentiationMode::Auto, 4, 4, true),
            (PrecisionMode::Fp32Bf16, DifferentiationMode::Analytic, 4, 2, true),
            (PrecisionMode::Fp64, DifferentiationMode::Dynamic, 8, 8, false),
        ];
        let mut jac = Vec::new();
        for (precision, mode, g, s, stored) in cases {
            let m = run(&cfg, precision, mode).memory_account;
            let want = expected(cameras, points, obs, g, s, stored);
            prop_assert_eq!(m.jacobian_bytes, want.jacobian_bytes);
            prop_assert_eq!(m.preconditioner_bytes, want.preconditioner_bytes);
            prop_assert_eq!(m.workspace_bytes, want.workspace_bytes);
            prop_assert_eq!(m.linear_state_bytes, want.linear_state_bytes);
            prop_assert!(m.graph_bytes > 0);
            prop_assert_eq!(m.total(), m.jacobian_bytes + m.preconditioner_bytes + m.workspace_bytes + m.linear_state_bytes + m.graph_bytes);
            jac.push(m.jacobian_bytes);
        }
        prop_assert_eq!(jac[0], 2 * jac[1]);
        prop_assert_eq!(jac[1], 2 * jac[2]);
        prop_assert_eq!(jac[3], 0);
    }
}

#[test]
fn circle_account_with_fixed_and_leveled_entries() {
    let mut config = ExperimentConfig::new(ProblemSpec::Circle {
        points: 50,
        radius: 5.0,
        noise_sigma: 0.1,
        fix_last: true,
        level_demo: true,
    });
    config.diff_mode = DifferentiationMode::Analytic;
    let report = run_experiment(&config).unwrap();
    let m = report.memory_account;
    // 49 free points; 49 active factors of which one touches the fixed point
    assert_eq!(report.summary.free_dims, 98);
    assert_eq!(report.summary.active_factors, 49);
    assert_eq!(m.jacobian_bytes, 49 * 2 * 8);
    assert_eq!(m.workspace_bytes, 5 * 98 * 8);
    assert_eq!(m.preconditioner_bytes, 49 * 4 * 8);
}
