//! Damped normal equations solved matrix-free with preconditioned conjugate
//! gradients over the graph structure.
//!
//! The system is `(D H D + λ I) x̃ = −D b` with `H = JᵀΩJ`, `b = JᵀΩr` and
//! `D = 1/√clamp(diag H)`; the step is `Δx = D x̃`. Neither `H` nor `J` is
//! assembled as a matrix. Every scatter into vertex columns goes through the
//! incidence lists of the [`ActivePlan`], in a fixed order.

mod pcg;
mod preconditioner;

pub use pcg::{pcg_solve, PcgConfig, PcgStats};
pub use preconditioner::{
    preconditioner_from_blocks, preconditioner_from_blocks_per_column, BlockJacobiPreconditioner, IdentityPreconditioner, Preconditioner,
};

pub(crate) use pcg::dot_g;

use rayon::prelude::*;

use crate::differentiation::JacobianStore;
use crate::graph::{ActivePlan, Graph, ParamCache};
use crate::precision::{Real, Storage};

pub const DEFAULT_CLAMP_MIN: f64 = 1e-6;
pub const DEFAULT_CLAMP_MAX: f64 = 1e32;

/// Matrix-free view of the normal equations at one linearisation point.
pub struct NormalEquations<'g, 'a, G: Real, S: Storage<G>> {
    graph: &'g Graph<'a, G, S>,
    plan: &'g ActivePlan,
    store: &'g JacobianStore<G, S>,
    params: &'g ParamCache<G>,
    contrib: Vec<Vec<G>>,
    scaled: Vec<G>,
    product: Vec<G>,
}

impl<'g, 'a, G: Real, S: Storage<G>> NormalEquations<'g, 'a, G, S> {
    pub(crate) fn new(
        graph: &'g Graph<'a, G, S>,
        plan: &'g ActivePlan,
        store: &'g JacobianStore<G, S>,
        params: &'g ParamCache<G>,
    ) -> Self {
        let contrib = plan
            .factors
            .iter()
            .map(|f| vec![G::zero(); f.active.len() * f.stride])
            .collect();
        let n = plan.total_free_dims();
        Self {
            graph,
            plan,
            store,
            params,
            contrib,
            scaled: vec![G::zero(); n],
            product: vec![G::zero(); n],
        }
    }

    /// `b = JᵀΩr` over free columns.
    pub fn gradient(&mut self) -> Vec<G> {
        for (k, (fs, fp)) in self.graph.factor_sets.iter().zip(&self.plan.factors).enumerate() {
            fs.gradient_contrib(
                self.params,
                fp,
                &self.store.residuals[k],
                &self.store.weights[k],
                self.store.stored(k),
                &mut self.contrib[k],
            );
        }
        let mut b = vec![G::zero(); self.plan.total_free_dims()];
        reduce(self.plan, &self.contrib, &mut b);
        b
    }

    /// Unscaled, undamped `Σ J_sᵀ w Ω J_s` per free vertex, `dim × dim`
    /// row-major, vertex descriptors in order.
    pub fn block_diagonal(&self) -> Vec<G> {
        let mut blocks = vec![G::zero(); self.plan.block_diagonal_len()];
        let mut offset = 0;
        for vp in &self.plan.vertices {
            let len = vp.free.len() * vp.dim * vp.dim;
            let out = &mut blocks[offset..offset + len];
            for inc in &vp.incidence {
                let k = inc.factor_set;
                self.graph.factor_sets[k].accumulate_blocks(
                    self.params,
                    &self.plan.factors[k],
                    &self.store.weights[k],
                    self.store.stored(k),
                    inc,
                    vp.dim,
                    out,
                );
            }
            offset += len;
        }
        blocks
    }

    /// `out = D H (D ∘ v) + λ v` with vectors at storage precision.
    pub fn hvp<V: Storage<G>>(&mut self, scaling: &[G], damping: G, v: &[V], out: &mut [V]) {
        self.hvp_by(scaling, Damping::Uniform(damping), v, out, |x: &V| x.load(), V::store);
    }

    /// `out = D H (D ∘ v) + Λ v` for a diagonal damping `Λ` given per column.
    pub fn hvp_per_column<V: Storage<G>>(&mut self, scaling: &[G], damping: &[G], v: &[V], out: &mut [V]) {
        self.hvp_by(scaling, Damping::Columns(damping), v, out, |x: &V| x.load(), V::store);
    }

    /// `out = D H (D ∘ v) + λ v` at graph precision.
    pub fn hvp_graph(&mut self, scaling: &[G], damping: G, v: &[G], out: &mut [G]) {
        self.hvp_by(scaling, Damping::Uniform(damping), v, out, |x: &G| *x, |x| x);
    }

    fn hvp_by<V: Send + Sync>(
        &mut self,
        scaling: &[G],
        damping: Damping<'_, G>,
        v: &[V],
        out: &mut [V],
        load: impl Fn(&V) -> G + Sync,
        store: impl Fn(G) -> V + Sync,
    ) {
        self.scaled
            .par_iter_mut()
            .zip(v.par_iter().zip(scaling.par_iter()))
            .for_each(|(x, (vi, di))| *x = load(vi) * *di);
        for (k, (fs, fp)) in self.graph.factor_sets.iter().zip(&self.plan.factors).enumerate() {
            fs.hvp_contrib(
                self.params,
                fp,
                &self.store.weights[k],
                self.store.stored(k),
                &self.scaled,
                &mut self.contrib[k],
            );
        }
        reduce(self.plan, &self.contrib, &mut self.product);
        out.par_iter_mut()
            .zip(self.product.par_iter().zip(scaling.par_iter().zip(v.par_iter())))
            .enumerate()
            .for_each(|(i, (o, (y, (di, vi))))| *o = store(*di * *y + damping.at(i) * load(vi)));
    }
}

/// Damping added to the scaled operator: `λ I` or a per-column diagonal.
#[derive(Clone, Copy)]
pub(crate) enum Damping<'d, G> {
    Uniform(G),
    Columns(&'d [G]),
}

impl<G: Copy> Damping<'_, G> {
    #[inline]
    pub(crate) fn at(&self, column: usize) -> G {
        match *self {
            Damping::Uniform(l) => l,
            Damping::Columns(c) => c[column],
        }
    }
}

/// Segmented reduction of per-(factor, slot) contributions into vertex
/// columns. Each free vertex sums its incident contributions in incidence
/// order, so the result is independent of the worker count.
fn reduce<G: Real>(plan: &ActivePlan, contrib: &[Vec<G>], out: &mut [G]) {
    for vp in &plan.vertices {
        let d = vp.dim;
        out[vp.base..vp.base + vp.free.len() * d]
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(k, o)| {
                o.iter_mut().for_each(|x| *x = G::zero());
                for inc in &vp.incidence {
                    let fp = &plan.factors[inc.factor_set];
                    let buf = &contrib[inc.factor_set];
                    let slot_off = fp.slot_offsets[inc.slot];
                    for &rank in inc.factors_of(k) {
                        let off = rank as usize * fp.stride + slot_off;
                        for (x, &c) in o.iter_mut().zip(&buf[off..off + d]) {
                            *x += c;
                        }
                    }
                }
            });
    }
}

/// Diagonal of the block diagonal.
pub(crate) fn diagonal_of_blocks<G: Real>(plan: &ActivePlan, blocks: &[G]) -> Vec<G> {
    let mut diag = Vec::with_capacity(plan.total_free_dims());
    let mut offset = 0;
    for vp in &plan.vertices {
        let d = vp.dim;
        for k in 0..vp.free.len() {
            let b = &blocks[offset + k * d * d..offset + (k + 1) * d * d];
            diag.extend((0..d).map(|r| b[r * d + r]));
        }
        offset += vp.free.len() * d * d;
    }
    diag
}

/// `b = JᵀΩr` and `diag(JᵀΩJ)` over free columns.
pub fn accumulate_gradient_and_diagonal<G: Real, S: Storage<G>>(
    graph: &Graph<'_, G, S>,
    jacobians: &JacobianStore<G, S>,
    plan: &ActivePlan,
) -> (Vec<G>, Vec<G>) {
    let params = graph.parameters();
    let mut eq = NormalEquations::new(graph, plan, jacobians, &params);
    let b = eq.gradient();
    let diag = diagonal_of_blocks(plan, &eq.block_diagonal());
    (b, diag)
}

pub fn clamp_diagonal<G: Real>(diagonal: &[G], clamp_min: f64, clamp_max: f64) -> Vec<G> {
    let (lo, hi) = (G::lit(clamp_min), G::lit(clamp_max));
    diagonal.iter().map(|&x| x.max(lo).min(hi)).collect()
}

/// `D = 1/√diag`; the diagonal must already be clamped.
pub fn compute_column_scaling<G: Real>(clamped_diagonal: &[G]) -> Vec<G> {
    clamped_diagonal.iter().map(|&x| G::one() / x.sqrt()).collect()
}

/// `(D H D + λ I) v` at graph precision.
pub fn hessian_vector_product<G: Real, S: Storage<G>>(
    graph: &Graph<'_, G, S>,
    jacobians: &JacobianStore<G, S>,
    plan: &ActivePlan,
    scaling: &[G],
    damping: G,
    v: &[G],
) -> Vec<G> {
    let params = graph.parameters();
    let mut eq = NormalEquations::new(graph, plan, jacobians, &params);
    let mut out = vec![G::zero(); v.len()];
    eq.hvp_graph(scaling, damping, v, &mut out);
    out
}

/// Block-Jacobi preconditioner of `D H D + λ I`.
pub fn build_preconditioner<G: Real, S: Storage<G>>(
    graph: &Graph<'_, G, S>,
    jacobians: &JacobianStore<G, S>,
    plan: &ActivePlan,
    scaling: &[G],
    damping: G,
) -> BlockJacobiPreconditioner<G> {
    let params = graph.parameters();
    let eq = NormalEquations::new(graph, plan, jacobians, &params);
    preconditioner_from_blocks(
        plan,
        &eq.block_diagonal(),
        scaling,
        damping,
        (DEFAULT_CLAMP_MIN, DEFAULT_CLAMP_MAX),
    )
}

/// `Δx = D ∘ Δx̃`.
pub fn unscale_step<G: Real>(scaled_step: &[G], scaling: &[G]) -> Vec<G> {
    scaled_step.iter().zip(scaling).map(|(&x, &d)| x * d).collect()
}
