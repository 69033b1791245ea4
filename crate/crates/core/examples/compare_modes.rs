//! Analytic, forward-mode and on-demand Jacobians on one problem: chi²
//! trace divergence, final MSE and Jacobian memory per mode.
//!
//!     cargo run --release --example compare_modes [-- path/to/problem.txt]

use graphopt::bal::SyntheticBalConfig;
use graphopt::experiment::{compare_modes, ExperimentConfig, ProblemSpec};

fn main() {
    let spec = match std::env::args().nth(1) {
        Some(path) => ProblemSpec::Bal { path: path.into() },
        None => ProblemSpec::synthetic_bal(&SyntheticBalConfig {
            num_cameras: 10,
            num_points: 800,
            ..Default::default()
        }),
    };
    let cmp = compare_modes(&ExperimentConfig::new(spec)).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(1);
    });
    for r in &cmp.reports {
        println!(
            "{:<9?} final {} {:.6}  jacobian bytes {:>9}  {:.2} s",
            r.config.diff_mode, r.metric.name, r.metric.final_value, r.memory_account.jacobian_bytes, r.summary.total_time_s
        );
    }
    for d in &cmp.divergences {
        println!(
            "{:?} vs {:?}: max chi2 trace divergence {:.2e}, final metric {:.2e}",
            d.a, d.b, d.max_relative, d.final_metric_relative
        );
    }
}
