//! Bundle adjustment on a BAL file, or on a generated scene when no path is
//! given.
//!
//!     cargo run --release --example bal -- problem-49-7776-pre.txt.gz fp32 analytic
//!     cargo run --release --example bal -- synthetic:49:7776 fp64 auto

use graphopt::bal::{generate_synthetic_bal, BalProblem, SyntheticBalConfig};
use graphopt::experiment::{run_bal_problem, ExperimentConfig, PrecisionMode, ProblemSpec};
use graphopt::DifferentiationMode;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let source = args.first().map(String::as_str).unwrap_or("synthetic:6:120");
    let precision = match args.get(1).map(String::as_str) {
        Some("fp32") => PrecisionMode::Fp32,
        Some("fp32-bf16") => PrecisionMode::Fp32Bf16,
        _ => PrecisionMode::Fp64,
    };
    let mode = match args.get(2).map(String::as_str) {
        Some("auto") => DifferentiationMode::Auto,
        Some("dynamic") => DifferentiationMode::Dynamic,
        _ => DifferentiationMode::Analytic,
    };

    let (spec, problem) = match source.strip_prefix("synthetic") {
        Some(rest) => {
            let mut cfg = SyntheticBalConfig::default();
            let dims: Vec<usize> = rest.split(':').filter_map(|s| s.parse().ok()).collect();
            if let [cameras, points] = dims[..] {
                cfg.num_cameras = cameras;
                cfg.num_points = points;
                cfg.views_per_point = 4;
            }
            (ProblemSpec::synthetic_bal(&cfg), generate_synthetic_bal(&cfg))
        }
        None => {
            let problem = BalProblem::read_file(source).unwrap_or_else(|e| {
                eprintln!("{source}: {e}");
                std::process::exit(1);
            });
            (ProblemSpec::Bal { path: source.into() }, problem)
        }
    };
    println!(
        "{} cameras, {} points, {} observations; {} / {:?}",
        problem.num_cameras(),
        problem.num_points(),
        problem.num_observations(),
        precision.label(),
        mode
    );

    let mut config = ExperimentConfig::new(spec);
    config.precision = precision;
    config.diff_mode = mode;
    let report = run_bal_problem(&config, &problem).unwrap();
    for it in &report.iterations {
        println!(
            "{:>3} chi2 {:.6e} -> {:.6e}  λ {:.2e}  pcg {:>2}  {}",
            it.iteration,
            it.chi2_before,
            it.chi2_after,
            it.damping,
            it.pcg_iterations,
            if it.accepted { "accept" } else { "reject" }
        );
    }
    println!(
        "MSE {:.4} -> {:.4} px² in {:.2} s ({:?})",
        report.metric.initial, report.metric.final_value, report.summary.total_time_s, report.summary.termination
    );
    println!("{:#?}", report.memory_account);
}
