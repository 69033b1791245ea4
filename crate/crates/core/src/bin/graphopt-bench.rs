use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use graphopt::experiment::{run_experiment, ExperimentConfig, ExperimentError, OutputFormat, PrecisionMode, ProblemSpec};
use graphopt::{DampingPlacement, DifferentiationMode};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_MALFORMED: u8 = 4;
const EXIT_SOLVE: u8 = 5;
const EXIT_OUTPUT: u8 = 6;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Problem {
    Circle,
    Bal,
    /// Generated scene in BAL conventions (no input file).
    SyntheticBal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    Fp64,
    Fp32,
    #[value(name = "fp32-bf16")]
    Fp32Bf16,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Diff {
    Analytic,
    Auto,
    Dynamic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Runs one Levenberg-Marquardt experiment and writes a JSON or CSV report.
#[derive(Parser, Debug)]
#[command(name = "graphopt-bench", version, about)]
struct Args {
    #[arg(long, value_enum, default_value = "circle")]
    problem: Problem,

    /// BAL file (plain text or gzip); required with `--problem bal`.
    #[arg(long)]
    input: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "fp64")]
    precision: Precision,

    #[arg(long, value_enum, default_value = "auto")]
    diff: Diff,

    /// LM iterations [default: 10 for circle, 50 for BAL]
    #[arg(long)]
    max_iters: Option<usize>,

    /// PCG iterations per LM step [default: 50 for circle, 10 for BAL]
    #[arg(long)]
    pcg_iters: Option<usize>,

    #[arg(long, default_value_t = 1e-6)]
    pcg_tol: f64,

    /// Low-quality PCG guard; 0 disables it.
    #[arg(long, default_value_t = 10.0)]
    rejection_ratio: f64,

    /// Huber threshold on rᵀΩr; plain squared loss when absent.
    #[arg(long)]
    huber: Option<f64>,

    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Fix the last circle point.
    #[arg(long)]
    fix_last: bool,

    /// Move one circle factor to level 1 (inactive at level 0).
    #[arg(long)]
    level_demo: bool,

    /// Damp the unscaled system, `(H + λI) Δx = −b`.
    #[arg(long)]
    damping_before_scaling: bool,

    /// Report path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

fn config_from(args: &Args) -> Result<ExperimentConfig, String> {
    let problem = match args.problem {
        Problem::Circle => ProblemSpec::Circle {
            points: 50,
            radius: 5.0,
            noise_sigma: 0.1,
            fix_last: args.fix_last,
            level_demo: args.level_demo,
        },
        Problem::Bal => ProblemSpec::Bal {
            path: args.input.clone().ok_or("--problem bal requires --input <path>")?,
        },
        Problem::SyntheticBal => ProblemSpec::synthetic_bal(&Default::default()),
    };
    if !matches!(args.problem, Problem::Circle) && (args.fix_last || args.level_demo) {
        return Err("--fix-last and --level-demo apply to the circle problem only".into());
    }
    let mut config = ExperimentConfig::new(problem);
    config.precision = match args.precision {
        Precision::Fp64 => PrecisionMode::Fp64,
        Precision::Fp32 => PrecisionMode::Fp32,
        Precision::Fp32Bf16 => PrecisionMode::Fp32Bf16,
    };
    config.diff_mode = match args.diff {
        Diff::Analytic => DifferentiationMode::Analytic,
        Diff::Auto => DifferentiationMode::Auto,
        Diff::Dynamic => DifferentiationMode::Dynamic,
    };
    if let Some(n) = args.max_iters {
        config.lm.max_iterations = n;
    }
    if let Some(n) = args.pcg_iters {
        config.lm.pcg.max_iterations = n;
    }
    config.lm.pcg.tolerance = args.pcg_tol;
    config.lm.pcg.rejection_ratio = (args.rejection_ratio != 0.0).then_some(args.rejection_ratio);
    if args.damping_before_scaling {
        config.lm.damping_placement = DampingPlacement::BeforeScaling;
    }
    config.huber_delta = args.huber;
    config.seed = args.seed;
    Ok(config)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match config_from(&args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let report = match run_experiment(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(match e {
                ExperimentError::Config(_) => EXIT_CONFIG,
                ExperimentError::Io { .. } => EXIT_IO,
                ExperimentError::Bal { .. } => EXIT_MALFORMED,
                ExperimentError::Graph(_) | ExperimentError::Solve(_) => EXIT_SOLVE,
                ExperimentError::Output(_) => EXIT_OUTPUT,
            });
        }
    };
    let format = match args.format {
        Format::Json => OutputFormat::Json,
        Format::Csv => OutputFormat::Csv,
    };
    let written = match &args.output {
        Some(path) => report.write_to(path, format),
        None => match format {
            OutputFormat::Json => {
                println!("{}", report.to_json());
                Ok(())
            }
            OutputFormat::Csv => report.write_csv(std::io::stdout().lock()),
        },
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_OUTPUT);
    }
    eprintln!(
        "{} {} {:?}: {} {:.6e} -> {:.6e} in {} iterations ({:?})",
        report.problem.kind,
        config.precision.label(),
        config.diff_mode,
        report.metric.name,
        report.metric.initial,
        report.metric.final_value,
        report.summary.iterations,
        report.summary.termination,
    );
    ExitCode::SUCCESS
}
