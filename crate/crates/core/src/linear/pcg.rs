use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preconditioner::Preconditioner;
use crate::precision::{Real, Storage};

/// Fixed reduction chunk; partial sums are combined in chunk order so the
/// result does not depend on the number of workers.
const REDUCTION_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcgConfig {
    pub max_iterations: usize,
    /// Relative residual threshold on the normalised system.
    pub tolerance: f64,
    /// A solve that stops above `rejection_ratio × tolerance` is low quality.
    /// `None` disables the guard.
    pub rejection_ratio: Option<f64>,
}

impl Default for PcgConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-6,
            rejection_ratio: Some(10.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcgStats {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub converged: bool,
    /// Stopped on `pᵀAp <= 0` or a non-finite recurrence.
    pub breakdown: bool,
}

impl PcgStats {
    pub fn low_quality(&self, config: &PcgConfig) -> bool {
        match config.rejection_ratio {
            Some(ratio) => !self.converged && self.final_relative_residual > ratio * config.tolerance,
            None => false,
        }
    }
}

fn dot_by<G: Real, T: Sync>(a: &[T], b: &[T], load: impl Fn(&T) -> G + Sync) -> G {
    let partial: Vec<G> = a
        .par_chunks(REDUCTION_CHUNK)
        .zip(b.par_chunks(REDUCTION_CHUNK))
        .map(|(x, y)| {
            let mut acc = G::zero();
            for (u, v) in x.iter().zip(y) {
                acc += load(u) * load(v);
            }
            acc
        })
        .collect();
    partial.into_iter().fold(G::zero(), |acc, p| acc + p)
}

pub(crate) fn dot<G: Real, S: Storage<G>>(a: &[S], b: &[S]) -> G {
    dot_by(a, b, |x: &S| x.load())
}

pub(crate) fn dot_g<G: Real>(a: &[G], b: &[G]) -> G {
    dot_by(a, b, |x: &G| *x)
}

/// Solves `A x = b` from `x₀ = 0` with preconditioned conjugate gradients.
///
/// `b` is scaled to unit norm before iterating and the solution rescaled
/// afterwards. Workspace vectors are held at storage precision `S`; every
/// dot product and scalar recurrence runs at `G`.
pub fn pcg_solve<G, S, H, M>(mut hvp: H, preconditioner: &M, b: &[G], config: &PcgConfig) -> (Vec<G>, PcgStats)
where
    G: Real,
    S: Storage<G>,
    H: FnMut(&[S], &mut [S]),
    M: Preconditioner<G> + ?Sized,
{
    let n = b.len();
    let b_norm = dot_g(b, b).sqrt();
    if b_norm == G::zero() || n == 0 {
        return (
            vec![G::zero(); n],
            PcgStats {
                iterations: 0,
                final_relative_residual: 0.0,
                converged: true,
                breakdown: false,
            },
        );
    }
    let tol = G::lit(config.tolerance);
    let inv = G::one() / b_norm;

    let mut x = vec![S::store(G::zero()); n];
    let mut r: Vec<S> = b.par_iter().map(|&v| S::store(v * inv)).collect();
    let mut z = vec![S::default(); n];
    let mut ap = vec![S::default(); n];
    preconditioner.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz: G = dot(&r, &z);

    let mut stats = PcgStats {
        iterations: 0,
        final_relative_residual: 1.0,
        converged: false,
        breakdown: false,
    };

    for k in 1..=config.max_iterations {
        hvp(&p, &mut ap);
        let pap: G = dot(&p, &ap);
        if !(pap > G::zero()) || !pap.is_finite() || !rz.is_finite() {
            stats.breakdown = true;
            break;
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(p.par_iter()).for_each(|(xi, pi)| {
            *xi = S::store(xi.load() + alpha * pi.load());
        });
        r.par_iter_mut().zip(ap.par_iter()).for_each(|(ri, api)| {
            *ri = S::store(ri.load() - alpha * api.load());
        });
        stats.iterations = k;
        let rel = dot::<G, S>(&r, &r).sqrt();
        stats.final_relative_residual = rel.to_f64_lossless();
        if rel <= tol {
            stats.converged = true;
            break;
        }
        preconditioner.apply(&r, &mut z);
        let rz_new: G = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).for_each(|(pi, zi)| {
            *pi = S::store(zi.load() + beta * pi.load());
        });
    }

    let solution = x.iter().map(|v| v.load() * b_norm).collect();
    (solution, stats)
}
