use rayon::prelude::*;

use super::Damping;
use crate::graph::ActivePlan;
use crate::precision::{Real, Storage};

pub trait Preconditioner<G: Real>: Sync {
    /// `z = M⁻¹ r`.
    fn apply<S: Storage<G>>(&self, r: &[S], z: &mut [S]);
}

pub struct IdentityPreconditioner;

impl<G: Real> Preconditioner<G> for IdentityPreconditioner {
    fn apply<S: Storage<G>>(&self, r: &[S], z: &mut [S]) {
        z.copy_from_slice(r);
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    column: usize,
    block: usize,
    count: usize,
    dim: usize,
}

/// Inverted per-vertex diagonal blocks of the scaled, damped system.
#[derive(Clone, Debug)]
pub struct BlockJacobiPreconditioner<G> {
    segments: Vec<Segment>,
    inverses: Vec<G>,
    fallbacks: usize,
}

impl<G: Real> BlockJacobiPreconditioner<G> {
    /// Blocks that were not positive definite and fell back to an inverse
    /// of their clamped diagonal.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks
    }

    pub fn bytes(&self) -> usize {
        self.inverses.len() * G::BYTES
    }

    /// Inverse block of the `k`-th free vertex of vertex descriptor `set`.
    pub fn block(&self, set: usize, k: usize) -> &[G] {
        let seg = &self.segments[set];
        let d2 = seg.dim * seg.dim;
        &self.inverses[seg.block + k * d2..seg.block + (k + 1) * d2]
    }
}

/// Builds the preconditioner from unscaled per-vertex Hessian blocks
/// (laid out as in [`NormalEquations::block_diagonal`]) for the operator
/// `D H D + λ I`.
///
/// [`NormalEquations::block_diagonal`]: super::NormalEquations::block_diagonal
pub fn preconditioner_from_blocks<G: Real>(
    plan: &ActivePlan,
    blocks: &[G],
    scaling: &[G],
    damping: G,
    clamp: (f64, f64),
) -> BlockJacobiPreconditioner<G> {
    build(plan, blocks, scaling, Damping::Uniform(damping), clamp)
}

/// As [`preconditioner_from_blocks`] for the operator `D H D + Λ` with a
/// diagonal damping given per column.
pub fn preconditioner_from_blocks_per_column<G: Real>(
    plan: &ActivePlan,
    blocks: &[G],
    scaling: &[G],
    damping: &[G],
    clamp: (f64, f64),
) -> BlockJacobiPreconditioner<G> {
    build(plan, blocks, scaling, Damping::Columns(damping), clamp)
}

fn build<G: Real>(
    plan: &ActivePlan,
    blocks: &[G],
    scaling: &[G],
    damping: Damping<'_, G>,
    clamp: (f64, f64),
) -> BlockJacobiPreconditioner<G> {
    let mut segments = Vec::with_capacity(plan.vertices.len());
    let mut block = 0;
    for vp in &plan.vertices {
        segments.push(Segment {
            column: vp.base,
            block,
            count: vp.free.len(),
            dim: vp.dim,
        });
        block += vp.free.len() * vp.dim * vp.dim;
    }
    assert_eq!(block, blocks.len());
    let (lo, hi) = (G::lit(clamp.0), G::lit(clamp.1));
    let mut inverses = vec![G::zero(); blocks.len()];
    let mut fallbacks = 0;
    for seg in &segments {
        let d = seg.dim;
        let range = seg.block..seg.block + seg.count * d * d;
        fallbacks += inverses[range.clone()]
            .par_chunks_mut(d * d)
            .zip(blocks[range].par_chunks(d * d))
            .enumerate()
            .map(|(k, (inv, b))| {
                let first = seg.column + k * d;
                let cols = &scaling[first..first + d];
                let mut a: Vec<G> = (0..d * d)
                    .map(|e| {
                        let (r, c) = (e / d, e % d);
                        let v = cols[r] * b[e] * cols[c];
                        if r == c {
                            v + damping.at(first + r)
                        } else {
                            v
                        }
                    })
                    .collect();
                if cholesky_inverse(&mut a, d, inv) {
                    0usize
                } else {
                    inv.iter_mut().for_each(|x| *x = G::zero());
                    for r in 0..d {
                        let diag = cols[r] * b[r * d + r] * cols[r] + damping.at(first + r);
                        inv[r * d + r] = G::one() / diag.max(lo).min(hi);
                    }
                    1
                }
            })
            .sum::<usize>();
    }
    BlockJacobiPreconditioner {
        segments,
        inverses,
        fallbacks,
    }
}

impl<G: Real> Preconditioner<G> for BlockJacobiPreconditioner<G> {
    fn apply<S: Storage<G>>(&self, r: &[S], z: &mut [S]) {
        for seg in &self.segments {
            let d = seg.dim;
            let cols = seg.column..seg.column + seg.count * d;
            z[cols.clone()]
                .par_chunks_mut(d)
                .zip(r[cols].par_chunks(d))
                .zip(self.inverses[seg.block..seg.block + seg.count * d * d].par_chunks(d * d))
                .for_each(|((zo, ri), inv)| {
                    for a in 0..d {
                        let mut acc = G::zero();
                        for b in 0..d {
                            acc += inv[a * d + b] * ri[b].load();
                        }
                        zo[a] = S::store(acc);
                    }
                });
        }
    }
}

/// Inverts a symmetric positive definite `d × d` matrix in place of `out`.
/// `a` is overwritten by its Cholesky factor. Returns false if a pivot is
/// not strictly positive or the result is non-finite.
pub(crate) fn cholesky_inverse<G: Real>(a: &mut [G], d: usize, out: &mut [G]) -> bool {
    // lower-triangular factor in place
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > G::zero()) || !s.is_finite() {
            return false;
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    // solve L Lᵀ X = I column by column
    let mut col = vec![G::zero(); d];
    for c in 0..d {
        for i in 0..d {
            let mut s = if i == c { G::one() } else { G::zero() };
            for k in 0..i {
                s -= a[i * d + k] * col[k];
            }
            col[i] = s / a[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = col[i];
            for k in i + 1..d {
                s -= a[k * d + i] * col[k];
            }
            col[i] = s / a[i * d + i];
        }
        for i in 0..d {
            out[i * d + c] = col[i];
        }
    }
    out.iter().all(|x| x.is_finite())
}
