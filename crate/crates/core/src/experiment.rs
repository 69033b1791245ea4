//! Experiment harness: builds a problem at a chosen precision and
//! differentiation mode, solves it, and emits a machine-readable report.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bal::{build_bal_graph, generate_synthetic_bal, BalError, BalProblem, SyntheticBalConfig};
use crate::circle::{build_circle_graph, generate_circle_problem, CircleOptions};
use crate::differentiation::DifferentiationMode;
use crate::graph::GraphError;
use crate::lm::{levenberg_marquardt, IterationRecord, LmConfig, MemoryAccount, SolveError, SolveSummary};
use crate::precision::{bf16, PrecisionPair, Real, Storage};

pub const SCHEMA_VERSION: u32 = 1;

const MSE_DEFINITION: &str =
    "sum over observations of the squared 2D reprojection residual norm (raw, no loss, identity weighting), divided by the number of observations; pixels^2";
const CHI2_DEFINITION: &str = "sum over active factors of rho(r^T Omega r), no 1/2 factor";
const MEMORY_NOTE: &str =
    "bytes implied by element counts and widths; allocator and runtime baseline overhead are excluded";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionMode {
    /// binary64 graph, binary64 system.
    Fp64,
    /// binary32 graph, binary32 system.
    Fp32,
    /// binary32 graph, bfloat16 system storage.
    Fp32Bf16,
}

impl PrecisionMode {
    pub const ALL: [PrecisionMode; 3] = [PrecisionMode::Fp64, PrecisionMode::Fp32, PrecisionMode::Fp32Bf16];

    pub fn pair(self) -> PrecisionPair {
        match self {
            PrecisionMode::Fp64 => PrecisionPair::of::<f64, f64>(),
            PrecisionMode::Fp32 => PrecisionPair::of::<f32, f32>(),
            PrecisionMode::Fp32Bf16 => PrecisionPair::of::<f32, bf16>(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PrecisionMode::Fp64 => "fp64",
            PrecisionMode::Fp32 => "fp32",
            PrecisionMode::Fp32Bf16 => "fp32-bf16",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Circle {
        points: usize,
        radius: f64,
        noise_sigma: f64,
        fix_last: bool,
        level_demo: bool,
    },
    Bal {
        path: PathBuf,
    },
    /// Generated scene in BAL conventions.
    SyntheticBal {
        num_cameras: usize,
        num_points: usize,
        views_per_point: usize,
        pixel_noise: f64,
        point_noise: f64,
        pose_noise: f64,
    },
}

impl ProblemSpec {
    pub fn circle() -> Self {
        ProblemSpec::Circle {
            points: 50,
            radius: 5.0,
            noise_sigma: 0.1,
            fix_last: false,
            level_demo: false,
        }
    }

    pub fn synthetic_bal(config: &SyntheticBalConfig) -> Self {
        ProblemSpec::SyntheticBal {
            num_cameras: config.num_cameras,
            num_points: config.num_points,
            views_per_point: config.views_per_point,
            pixel_noise: config.pixel_noise,
            point_noise: config.point_noise,
            pose_noise: config.pose_noise,
        }
    }

    pub fn is_bal(&self) -> bool {
        !matches!(self, ProblemSpec::Circle { .. })
    }

    /// Outer and inner iteration caps used when none are given:
    /// 10 LM / 50 PCG for the circle, 50 LM / 10 PCG for BAL problems.
    pub fn default_iterations(&self) -> (usize, usize) {
        if self.is_bal() {
            (50, 10)
        } else {
            (10, 50)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub precision: PrecisionMode,
    pub diff_mode: DifferentiationMode,
    pub lm: LmConfig,
    pub seed: u64,
    pub huber_delta: Option<f64>,
}

impl ExperimentConfig {
    /// Defaults for `problem`, including its iteration caps.
    pub fn new(problem: ProblemSpec) -> Self {
        let (outer, inner) = problem.default_iterations();
        let mut lm = LmConfig {
            max_iterations: outer,
            ..Default::default()
        };
        lm.pcg.max_iterations = inner;
        Self {
            problem,
            precision: PrecisionMode::Fp64,
            diff_mode: DifferentiationMode::Auto,
            lm,
            seed: 42,
            huber_delta: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed BAL input {path}: {source}")]
    Bal {
        path: PathBuf,
        #[source]
        source: BalError,
    },
    #[error("graph construction failed: {0}")]
    Graph(#[from] GraphError),
    #[error("solve failed: {0}")]
    Solve(#[from] SolveError),
    #[error("cannot write report: {0}")]
    Output(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSummary {
    pub kind: String,
    pub vertices: usize,
    pub factors: usize,
    pub cameras: Option<usize>,
    pub points: Option<usize>,
    pub observations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    /// `"mse"` for BAL problems, `"chi2"` otherwise.
    pub name: String,
    pub definition: String,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub precision: PrecisionPair,
    pub problem: ProblemSummary,
    pub metric: Metric,
    pub chi2_definition: String,
    pub iterations: Vec<IterationRecord>,
    pub summary: SolveSummary,
    pub memory_account: MemoryAccount,
    pub memory_note: String,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    /// One row per iteration; see [`CSV_COLUMNS`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_COLUMNS).map_err(|e| ExperimentError::Output(e.to_string()))?;
        for r in &self.iterations {
            let row = [
                self.problem.kind.clone(),
                self.config.precision.label().to_string(),
                format!("{:?}", self.config.diff_mode).to_lowercase(),
                r.iteration.to_string(),
                format!("{:e}", r.chi2_before),
                format!("{:e}", r.chi2_after),
                format!("{:e}", r.damping),
                format!("{:e}", r.gain_ratio),
                r.pcg_iterations.to_string(),
                r.pcg_converged.to_string(),
                format!("{:e}", r.pcg_relative_residual),
                r.pcg_low_quality.to_string(),
                r.preconditioner_fallbacks.to_string(),
                r.accepted.to_string(),
                format!("{:.6}", r.wall_time_s),
                self.memory_account.jacobian_bytes.to_string(),
            ];
            w.write_record(&row).map_err(|e| ExperimentError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| ExperimentError::Output(e.to_string()))
    }

    pub fn write_to(&self, path: &Path, format: OutputFormat) -> Result<(), ExperimentError> {
        let file = std::fs::File::create(path).map_err(|e| ExperimentError::Output(format!("{}: {e}", path.display())))?;
        match format {
            OutputFormat::Json => {
                let mut f = std::io::BufWriter::new(file);
                f.write_all(self.to_json().as_bytes())
                    .and_then(|_| f.write_all(b"\n"))
                    .map_err(|e| ExperimentError::Output(e.to_string()))
            }
            OutputFormat::Csv => self.write_csv(file),
        }
    }
}

pub const CSV_COLUMNS: [&str; 16] = [
    "problem",
    "precision",
    "diff_mode",
    "iteration",
    "chi2_before",
    "chi2_after",
    "damping",
    "gain_ratio",
    "pcg_iterations",
    "pcg_converged",
    "pcg_relative_residual",
    "pcg_low_quality",
    "preconditioner_fallbacks",
    "accepted",
    "wall_time_s",
    "jacobian_bytes",
];

/// Reads a BAL file (plain or gzip).
pub fn load_bal(path: &Path) -> Result<BalProblem<f64>, ExperimentError> {
    BalProblem::read_file(path).map_err(|e| match e {
        BalError::Io(source) => ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        },
        source => ExperimentError::Bal {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn validate(config: &ExperimentConfig) -> Result<(), ExperimentError> {
    let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
    if config.lm.max_iterations == 0 {
        return bad("max iterations must be positive");
    }
    if config.lm.pcg.max_iterations == 0 {
        return bad("PCG iterations must be positive");
    }
    if !(config.lm.pcg.tolerance > 0.0) {
        return bad("PCG tolerance must be positive");
    }
    if let Some(r) = config.lm.pcg.rejection_ratio {
        if !(r > 0.0) {
            return bad("rejection ratio must be positive");
        }
    }
    if let Some(d) = config.huber_delta {
        if !(d > 0.0) || !d.is_finite() {
            return bad("Huber delta must be positive and finite");
        }
    }
    if let ProblemSpec::Circle { points, .. } = config.problem {
        if points == 0 {
            return bad("circle problem needs at least one point");
        }
    }
    Ok(())
}

/// Builds, solves and reports one configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    validate(config)?;
    let bal = match &config.problem {
        ProblemSpec::Bal { path } => Some(load_bal(path)?),
        ProblemSpec::SyntheticBal {
            num_cameras,
            num_points,
            views_per_point,
            pixel_noise,
            point_noise,
            pose_noise,
        } => Some(generate_synthetic_bal(&SyntheticBalConfig {
            num_cameras: *num_cameras,
            num_points: *num_points,
            views_per_point: *views_per_point,
            pixel_noise: *pixel_noise,
            point_noise: *point_noise,
            pose_noise: *pose_noise,
            seed: config.seed,
        })),
        ProblemSpec::Circle { .. } => None,
    };
    run_loaded(config, bal.as_ref())
}

/// As [`run_experiment`] with the BAL problem already in memory.
pub fn run_bal_problem(config: &ExperimentConfig, problem: &BalProblem<f64>) -> Result<ExperimentReport, ExperimentError> {
    validate(config)?;
    run_loaded(config, Some(problem))
}

fn run_loaded(config: &ExperimentConfig, bal: Option<&BalProblem<f64>>) -> Result<ExperimentReport, ExperimentError> {
    match config.precision {
        PrecisionMode::Fp64 => run_typed::<f64, f64>(config, bal),
        PrecisionMode::Fp32 => run_typed::<f32, f32>(config, bal),
        PrecisionMode::Fp32Bf16 => run_typed::<f32, bf16>(config, bal),
    }
}

fn run_typed<G: Real, S: Storage<G>>(
    config: &ExperimentConfig,
    bal: Option<&BalProblem<f64>>,
) -> Result<ExperimentReport, ExperimentError> {
    let (problem, metric, solve) = match (&config.problem, bal) {
        (
            ProblemSpec::Circle {
                points,
                radius,
                noise_sigma,
                fix_last,
                level_demo,
            },
            _,
        ) => {
            let mut data = generate_circle_problem::<G>(*points, *radius, *noise_sigma, config.seed);
            let options = CircleOptions {
                fix_last: *fix_last,
                level_demo: *level_demo,
                huber_delta: config.huber_delta,
            };
            let mut g = build_circle_graph::<G, S>(&mut data, config.diff_mode, options)?;
            let solve = levenberg_marquardt(&mut g.graph, &config.lm)?;
            let summary = ProblemSummary {
                kind: "circle".into(),
                vertices: g.graph.vertex_count(g.points),
                factors: g.graph.factor_count(g.factors),
                cameras: None,
                points: None,
                observations: None,
            };
            let metric = Metric {
                name: "chi2".into(),
                definition: CHI2_DEFINITION.into(),
                initial: solve.summary.initial_chi2,
                final_value: solve.summary.final_chi2,
            };
            (summary, metric, solve)
        }
        (_, Some(bal)) => {
            let mut data = bal.convert::<G>();
            let mut g = build_bal_graph::<G, S>(&mut data, config.diff_mode, config.huber_delta)?;
            let initial = g.mse();
            let solve = levenberg_marquardt(&mut g.graph, &config.lm)?;
            let summary = ProblemSummary {
                kind: "bal".into(),
                vertices: g.graph.vertex_count(g.cameras) + g.graph.vertex_count(g.points),
                factors: g.graph.factor_count(g.factors),
                cameras: Some(g.graph.vertex_count(g.cameras)),
                points: Some(g.graph.vertex_count(g.points)),
                observations: Some(g.num_observations),
            };
            let metric = Metric {
                name: "mse".into(),
                definition: MSE_DEFINITION.into(),
                initial,
                final_value: g.mse(),
            };
            (summary, metric, solve)
        }
        (_, None) => return Err(ExperimentError::Config("BAL problem data missing".into())),
    };
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        precision: PrecisionPair::of::<G, S>(),
        problem,
        metric,
        chi2_definition: CHI2_DEFINITION.into(),
        iterations: solve.iterations,
        summary: solve.summary,
        memory_account: solve.memory_account,
        memory_note: MEMORY_NOTE.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDivergence {
    pub a: DifferentiationMode,
    pub b: DifferentiationMode,
    /// `|chi²_a − chi²_b| / chi²_a` over the chi² at the start of each
    /// iteration, then the final chi².
    pub per_iteration: Vec<f64>,
    pub max_relative: f64,
    pub final_metric_relative: f64,
    pub jacobian_bytes_delta: i64,
    pub trace_lengths: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub reports: Vec<ExperimentReport>,
    pub divergences: Vec<ModeDivergence>,
}

fn relative(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(f64::MIN_POSITIVE)
    }
}

fn chi2_trace(r: &ExperimentReport) -> Vec<f64> {
    let mut t: Vec<f64> = r.iterations.iter().map(|i| i.chi2_before).collect();
    t.push(r.summary.final_chi2);
    t
}

/// Runs analytic, auto and dynamic modes under otherwise identical
/// configuration and tabulates pairwise divergence.
pub fn compare_modes(base: &ExperimentConfig) -> Result<ModeComparison, ExperimentError> {
    let modes = [
        DifferentiationMode::Analytic,
        DifferentiationMode::Auto,
        DifferentiationMode::Dynamic,
    ];
    let bal = match &base.problem {
        ProblemSpec::Bal { path } => Some(load_bal(path)?),
        _ => None,
    };
    let reports = modes
        .iter()
        .map(|&m| {
            let cfg = ExperimentConfig {
                diff_mode: m,
                ..base.clone()
            };
            match &bal {
                Some(p) => run_bal_problem(&cfg, p),
                None => run_experiment(&cfg),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut divergences = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (ra, rb) = (&reports[i], &reports[j]);
            let (ta, tb) = (chi2_trace(ra), chi2_trace(rb));
            let per_iteration: Vec<f64> = ta.iter().zip(&tb).map(|(&a, &b)| relative(a, b)).collect();
            divergences.push(ModeDivergence {
                a: modes[i],
                b: modes[j],
                max_relative: per_iteration.iter().copied().fold(0.0, f64::max),
                per_iteration,
                final_metric_relative: relative(ra.metric.final_value, rb.metric.final_value),
                jacobian_bytes_delta: rb.memory_account.jacobian_bytes as i64 - ra.memory_account.jacobian_bytes as i64,
                trace_lengths: (ra.iterations.len(), rb.iterations.len()),
            });
        }
    }
    Ok(ModeComparison { reports, divergences })
}
