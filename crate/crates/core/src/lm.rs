//! Levenberg-Marquardt outer loop with in-place steps and exact revert.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::differentiation::{materialize_with, JacobianStore};
use crate::graph::{ActivePlan, Graph, ParamCache};
use crate::linear::{
    clamp_diagonal, compute_column_scaling, diagonal_of_blocks, dot_g, pcg_solve, preconditioner_from_blocks_per_column,
    unscale_step, NormalEquations, PcgConfig, DEFAULT_CLAMP_MAX, DEFAULT_CLAMP_MIN,
};
use crate::precision::{PrecisionPair, Real, Storage};

/// Damping above which the solve gives up.
pub const DAMPING_LIMIT: f64 = 1e32;
/// Gradient max-norm below which the current point is stationary.
pub const GRADIENT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Relative chi² decrease on an accepted step below which the solve stops.
    pub tolerance: f64,
    /// Factors with level `<= level` participate.
    pub level: u8,
    /// `λ₀ = τ · max(scaled diagonal)`.
    pub initial_damping_factor: f64,
    pub pcg: PcgConfig,
    pub damping_placement: DampingPlacement,
    /// Re-evaluate Jacobians after a rejected step as well.
    pub relinearize_on_reject: bool,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            tolerance: 1e-6,
            level: 0,
            initial_damping_factor: 1e-4,
            pcg: PcgConfig::default(),
            damping_placement: DampingPlacement::default(),
            relinearize_on_reject: false,
            clamp_min: DEFAULT_CLAMP_MIN,
            clamp_max: DEFAULT_CLAMP_MAX,
        }
    }
}

/// Where `λ` enters relative to the Jacobi column scaling `D`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingPlacement {
    /// `(D H D + λ I) x̃ = −D b`: Marquardt-style damping proportional to
    /// the clamped Hessian diagonal in the original coordinates.
    #[default]
    AfterScaling,
    /// `(D H D + λ D²) x̃ = −D b`, i.e. `(H + λ I) Δx = −b`.
    BeforeScaling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    MaxIterations,
    RelativeDecrease,
    DampingOverflow,
    SmallGradient,
    NoFreeParameters,
    /// Jacobians at an accepted point were non-finite; the point is kept.
    NonFiniteJacobian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub chi2_before: f64,
    /// Chi² at the candidate, whether or not it was accepted.
    pub chi2_after: f64,
    /// Damping the step was solved with.
    pub damping: f64,
    pub gain_ratio: f64,
    pub pcg_iterations: usize,
    pub pcg_converged: bool,
    pub pcg_relative_residual: f64,
    pub pcg_low_quality: bool,
    pub preconditioner_fallbacks: usize,
    pub accepted: bool,
    pub wall_time_s: f64,
}

/// Bytes implied by element counts and widths; allocator overhead excluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAccount {
    /// Stored Jacobian blocks at system precision.
    pub jacobian_bytes: usize,
    /// Inverted diagonal blocks at graph precision.
    pub preconditioner_bytes: usize,
    /// The five PCG vectors at system precision.
    pub workspace_bytes: usize,
    /// Graph-precision buffers of the linear system: gradient, diagonal,
    /// scaling, step, operator scratch, contribution buffer, block diagonal,
    /// residuals, weights and the parameter cache.
    pub linear_state_bytes: usize,
    /// Descriptor storage: ids, flags, observations, information, losses.
    pub graph_bytes: usize,
}

impl MemoryAccount {
    pub fn total(&self) -> usize {
        self.jacobian_bytes + self.preconditioner_bytes + self.workspace_bytes + self.linear_state_bytes + self.graph_bytes
    }

    pub fn compute<G: Real, S: Storage<G>>(graph: &Graph<'_, G, S>, plan: &ActivePlan, store: &JacobianStore<G, S>) -> Self {
        let n = plan.total_free_dims();
        let g = G::BYTES;
        let params: usize = graph.vertex_sets.iter().map(|v| v.len() * v.dimension()).sum();
        Self {
            jacobian_bytes: store.jacobian_bytes(),
            preconditioner_bytes: plan.block_diagonal_len() * g,
            workspace_bytes: 5 * n * S::BYTES,
            linear_state_bytes: g
                * (7 * n
                    + plan.contribution_len()
                    + plan.block_diagonal_len()
                    + plan.total_residual_dims()
                    + plan.active_factor_count()
                    + params),
            graph_bytes: graph.storage_bytes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    pub accepted_iterations: usize,
    pub final_damping: f64,
    pub termination: TerminationReason,
    pub free_dims: usize,
    pub residual_dims: usize,
    pub active_factors: usize,
    pub total_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub precision: PrecisionPair,
    pub config: LmConfig,
    pub iterations: Vec<IterationRecord>,
    pub summary: SolveSummary,
    pub memory_account: MemoryAccount,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("initial chi² is not finite ({0})")]
    NonFiniteInitialError(f64),
    #[error("residuals, weights or Jacobians at the initial point are not finite")]
    NonFiniteInitialLinearization,
}

/// Nielsen schedule. Accept: `λ·max(1/3, 1 − (2ρ − 1)³)`, `ν = 2`.
/// Reject: `λ·ν`, `ν = 2ν`.
pub fn update_damping(damping: f64, nu: f64, accepted: bool, gain_ratio: f64) -> (f64, f64) {
    if accepted {
        let rho = if gain_ratio.is_finite() { gain_ratio } else { 0.0 };
        let t = 2.0 * rho - 1.0;
        (damping * (1.0 / 3.0f64).max(1.0 - t * t * t), 2.0)
    } else {
        (damping * nu, 2.0 * nu)
    }
}

/// `τ · max(diagonal)` of the damped matrix; the maximum of an empty diagonal is 1.
pub fn initialize_damping(diagonal: &[f64], tau: f64) -> f64 {
    let max = diagonal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    tau * if max.is_finite() { max } else { 1.0 }
}

/// Everything derived from one linearisation point that survives a rejected
/// step: only `λ` changes between attempts.
struct Linearization<G: Real, S: Storage<G>> {
    store: JacobianStore<G, S>,
    gradient: Vec<G>,
    blocks: Vec<G>,
    scaling: Vec<G>,
    scaled_diagonal: Vec<G>,
    /// `Λ = λ · weights`: ones after scaling, `D²` before.
    damping_weights: Vec<G>,
}

impl<G: Real, S: Storage<G>> Linearization<G, S> {
    fn compute(graph: &Graph<'_, G, S>, plan: &ActivePlan, params: &ParamCache<G>, config: &LmConfig) -> Option<Self> {
        let store = materialize_with(graph, plan, params)?;
        let mut eq = NormalEquations::new(graph, plan, &store, params);
        let gradient = eq.gradient();
        let blocks = eq.block_diagonal();
        drop(eq);
        let diagonal = diagonal_of_blocks(plan, &blocks);
        let clamped = clamp_diagonal(&diagonal, config.clamp_min, config.clamp_max);
        let scaling = compute_column_scaling(&clamped);
        let scaled_diagonal = diagonal.iter().zip(&scaling).map(|(&h, &d)| h * d * d).collect();
        let damping_weights = match config.damping_placement {
            DampingPlacement::AfterScaling => vec![G::one(); scaling.len()],
            DampingPlacement::BeforeScaling => scaling.iter().map(|&d| d * d).collect(),
        };
        let finite = gradient.iter().chain(&blocks).all(|x| x.is_finite());
        finite.then_some(Self {
            store,
            gradient,
            blocks,
            scaling,
            scaled_diagonal,
            damping_weights,
        })
    }
}

fn to_f64<G: Real>(x: G) -> f64 {
    x.to_f64_lossless()
}

/// Minimises `Σ ρ(rᵀΩr)` over the free vertices of `graph`, writing every
/// accepted step into the user's vertex storage.
pub fn levenberg_marquardt<G: Real, S: Storage<G>>(
    graph: &mut Graph<'_, G, S>,
    config: &LmConfig,
) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let plan = graph.activate(config.level);
    let mut params = graph.parameters();
    let mut chi2 = graph.chi2(&plan, &params);
    if !chi2.is_finite() {
        return Err(SolveError::NonFiniteInitialError(to_f64(chi2)));
    }
    let initial_chi2 = to_f64(chi2);
    let mut trace = Vec::new();

    let finish = |graph: &Graph<'_, G, S>,
                  trace: Vec<IterationRecord>,
                  store: Option<&JacobianStore<G, S>>,
                  final_chi2: f64,
                  damping: f64,
                  termination: TerminationReason| {
        let memory_account = match store {
            Some(s) => MemoryAccount::compute(graph, &plan, s),
            None => MemoryAccount {
                graph_bytes: graph.storage_bytes(),
                ..Default::default()
            },
        };
        SolveReport {
            precision: PrecisionPair::of::<G, S>(),
            config: *config,
            summary: SolveSummary {
                initial_chi2,
                final_chi2,
                iterations: trace.len(),
                accepted_iterations: trace.iter().filter(|r: &&IterationRecord| r.accepted).count(),
                final_damping: damping,
                termination,
                free_dims: plan.total_free_dims(),
                residual_dims: plan.total_residual_dims(),
                active_factors: plan.active_factor_count(),
                total_time_s: start.elapsed().as_secs_f64(),
            },
            iterations: trace,
            memory_account,
        }
    };

    if plan.total_free_dims() == 0 {
        return Ok(finish(graph, trace, None, initial_chi2, 0.0, TerminationReason::NoFreeParameters));
    }

    let mut lin = Linearization::compute(graph, &plan, &params, config).ok_or(SolveError::NonFiniteInitialLinearization)?;
    let reference: Vec<f64> = match config.damping_placement {
        DampingPlacement::AfterScaling => lin.scaled_diagonal.iter().map(|&x| to_f64(x)).collect(),
        DampingPlacement::BeforeScaling => lin.scaling.iter().map(|&d| to_f64(G::one() / (d * d))).collect(),
    };
    let mut damping = initialize_damping(&reference, config.initial_damping_factor);
    let mut nu = 2.0;
    let gradient_tol = G::lit(GRADIENT_TOLERANCE);
    let mut termination = TerminationReason::MaxIterations;

    for iteration in 0..config.max_iterations {
        let max_gradient = lin.gradient.iter().fold(G::zero(), |m, &x| m.max(x.abs()));
        if max_gradient < gradient_tol {
            termination = TerminationReason::SmallGradient;
            break;
        }
        let iter_start = Instant::now();
        let lambda = G::lit(damping);

        // scaled system: (D H D + Λ) x̃ = −D b
        let rhs: Vec<G> = lin.gradient.iter().zip(&lin.scaling).map(|(&b, &d)| -(b * d)).collect();
        let column_damping: Vec<G> = lin.damping_weights.iter().map(|&w| lambda * w).collect();
        let precond = preconditioner_from_blocks_per_column(
            &plan,
            &lin.blocks,
            &lin.scaling,
            &column_damping,
            (config.clamp_min, config.clamp_max),
        );
        let (scaled_step, stats) = {
            let mut eq = NormalEquations::new(graph, &plan, &lin.store, &params);
            let (scaling, cd) = (&lin.scaling, &column_damping);
            pcg_solve::<G, S, _, _>(|v, out| eq.hvp_per_column(scaling, cd, v, out), &precond, &rhs, &config.pcg)
        };
        let low_quality = stats.low_quality(&config.pcg);
        if low_quality {
            damping *= nu;
        }

        // model decrease h̃ᵀ(Λh̃ − D b) = h̃ᵀ(Λh̃ + rhs)
        let predicted: G = {
            let t: Vec<G> = scaled_step
                .iter()
                .zip(&rhs)
                .zip(&column_damping)
                .map(|((&h, &r), &l)| l * h + r)
                .collect();
            dot_g(&scaled_step, &t)
        };
        let step = unscale_step(&scaled_step, &lin.scaling);

        let snapshot = graph.snapshot(&plan);
        graph.apply_step(&plan, &step);
        let candidate = graph.parameters();
        let new_chi2 = graph.chi2(&plan, &candidate);
        let accepted = new_chi2.is_finite() && new_chi2 < chi2;
        let gain_ratio = to_f64(chi2 - new_chi2) / to_f64(predicted);

        let mut record = IterationRecord {
            iteration,
            chi2_before: to_f64(chi2),
            chi2_after: to_f64(new_chi2),
            damping: to_f64(lambda),
            gain_ratio,
            pcg_iterations: stats.iterations,
            pcg_converged: stats.converged,
            pcg_relative_residual: stats.final_relative_residual,
            pcg_low_quality: low_quality,
            preconditioner_fallbacks: precond.fallback_count(),
            accepted,
            wall_time_s: 0.0,
        };

        if accepted {
            let relative_decrease = to_f64((chi2 - new_chi2) / chi2);
            chi2 = new_chi2;
            params = candidate;
            (damping, nu) = update_damping(damping, nu, true, gain_ratio);
            let relinearized = Linearization::compute(graph, &plan, &params, config);
            record.wall_time_s = iter_start.elapsed().as_secs_f64();
            trace.push(record);
            match relinearized {
                Some(l) => lin = l,
                None => {
                    termination = TerminationReason::NonFiniteJacobian;
                    break;
                }
            }
            if relative_decrease < config.tolerance {
                termination = TerminationReason::RelativeDecrease;
                break;
            }
        } else {
            graph.restore(&snapshot);
            (damping, nu) = update_damping(damping, nu, false, gain_ratio);
            if config.relinearize_on_reject {
                if let Some(l) = Linearization::compute(graph, &plan, &params, config) {
                    lin = l;
                }
            }
            record.wall_time_s = iter_start.elapsed().as_secs_f64();
            trace.push(record);
            if damping > DAMPING_LIMIT {
                termination = TerminationReason::DampingOverflow;
                break;
            }
        }
    }

    let final_chi2 = to_f64(chi2);
    Ok(finish(graph, trace, Some(&lin.store), final_chi2, damping, termination))
}
