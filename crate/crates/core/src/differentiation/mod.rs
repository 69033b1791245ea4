//! Jacobian evaluation: closed-form, per-column dual numbers, or dynamic.

mod dual;

pub use dual::{dual_eval, Dual, Number};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::graph::{ActivePlan, FactorType, Graph, ParamCache};
use crate::precision::{Real, Storage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifferentiationMode {
    /// Closed-form blocks from the factor type, stored.
    Analytic,
    /// Forward-mode dual numbers, one pass per column, stored.
    Auto,
    /// Nothing stored; blocks are recomputed at every use.
    Dynamic,
}

impl DifferentiationMode {
    pub fn is_stored(self) -> bool {
        !matches!(self, DifferentiationMode::Dynamic)
    }
}

/// Jacobian block of `slot` by forward-mode differentiation.
///
/// One residual evaluation per column of the slot; the seed of every other
/// parameter stays zero. `out` is row-major `RESIDUAL_DIM × dim(slot)`.
pub fn jacobian_auto<G: Real, F: FactorType<G>>(
    factor: &F,
    params: &[&[G]],
    observation: &F::Observation,
    data: &F::Data,
    slot: usize,
    out: &mut [G],
) {
    let rd = F::RESIDUAL_DIM;
    let d = params[slot].len();
    debug_assert_eq!(out.len(), rd * d);
    let mut duals: SmallVec<[SmallVec<[Dual<G>; 16]>; 4]> = params
        .iter()
        .map(|block| block.iter().map(|&x| Dual::constant(x)).collect())
        .collect();
    let mut res: SmallVec<[Dual<G>; 16]> = SmallVec::from_elem(Dual::default(), rd);
    for c in 0..d {
        duals[slot][c].deriv = G::one();
        {
            let refs: SmallVec<[&[Dual<G>]; 4]> = duals.iter().map(|v| v.as_slice()).collect();
            factor.residual(&refs, observation, data, &mut res);
        }
        for (a, r) in res.iter().enumerate() {
            out[a * d + c] = r.deriv;
        }
        duals[slot][c].deriv = G::zero();
    }
}

/// Closed-form Jacobian block supplied by the factor type.
pub fn jacobian_analytic<G: Real, F: FactorType<G>>(
    factor: &F,
    params: &[&[G]],
    observation: &F::Observation,
    data: &F::Data,
    slot: usize,
    out: &mut [G],
) {
    assert!(F::HAS_ANALYTIC_JACOBIAN, "factor type has no analytic Jacobian");
    factor.analytic_jacobian(params, observation, data, slot, out);
}

/// Linearisation of every active factor: residuals, IRLS weights and, for
/// stored modes, the Jacobian blocks at system precision.
pub struct JacobianStore<G, S> {
    pub(crate) residuals: Vec<Vec<G>>,
    pub(crate) weights: Vec<Vec<G>>,
    pub(crate) blocks: Vec<Option<Vec<S>>>,
}

impl<G: Real, S: Storage<G>> JacobianStore<G, S> {
    /// Stored Jacobian blocks across all factor descriptors.
    pub fn block_count(&self, plan: &ActivePlan) -> usize {
        self.blocks
            .iter()
            .zip(&plan.factors)
            .filter(|(b, _)| b.is_some())
            .map(|(_, f)| f.active.len() * f.arity)
            .sum()
    }

    pub fn jacobian_bytes(&self) -> usize {
        self.blocks
            .iter()
            .flatten()
            .map(|b| b.len() * S::BYTES)
            .sum()
    }

    pub fn is_dynamic(&self, factor_set: usize) -> bool {
        self.blocks[factor_set].is_none()
    }

    pub(crate) fn stored(&self, factor_set: usize) -> Option<&[S]> {
        self.blocks[factor_set].as_deref()
    }
}

/// Evaluates residuals, weights and (for stored modes) Jacobians at the
/// current parameters. Returns `None` if any entry is non-finite.
pub fn materialize_jacobians<G: Real, S: Storage<G>>(
    graph: &Graph<'_, G, S>,
    plan: &ActivePlan,
) -> Option<JacobianStore<G, S>> {
    let params = graph.parameters();
    materialize_with(graph, plan, &params)
}

pub(crate) fn materialize_with<G: Real, S: Storage<G>>(
    graph: &Graph<'_, G, S>,
    plan: &ActivePlan,
    params: &ParamCache<G>,
) -> Option<JacobianStore<G, S>> {
    let mut store = JacobianStore {
        residuals: Vec::new(),
        weights: Vec::new(),
        blocks: Vec::new(),
    };
    let mut finite = true;
    for (fs, fp) in graph.factor_sets.iter().zip(&plan.factors) {
        let n = fp.active.len();
        let mut residuals = vec![G::zero(); n * fp.residual_dim];
        let mut weights = vec![G::zero(); n];
        let mut blocks = fs
            .mode()
            .is_stored()
            .then(|| vec![S::default(); n * fp.jacobian_stride()]);
        finite &= fs.linearize(params, fp, &mut residuals, &mut weights, blocks.as_deref_mut());
        store.residuals.push(residuals);
        store.weights.push(weights);
        store.blocks.push(blocks);
    }
    finite.then_some(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circle::{CircleFactor, Point2};
    use crate::graph::{FactorDescriptor, Loss, VertexDescriptor};
    use crate::precision::bf16;

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
        let h = 1e-6f64.max(1e-6 * x[i].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn circle_block_matches_finite_differences() {
        let x = [2.0f64, 3.0];
        let fd: Vec<f64> = (0..2)
            .map(|i| central_difference(|p| p[0] * p[0] + p[1] * p[1] - 1.0, &x, i))
            .collect();
        // frozen oracle values
        assert!((fd[0] - 4.0).abs() < 1e-6 && (fd[1] - 6.0).abs() < 1e-6);

        let mut auto = [0.0; 2];
        jacobian_auto(&CircleFactor, &[&x], &1.0, &0u8, 0, &mut auto);
        assert_eq!(auto, [4.0, 6.0]);
        let mut analytic = [0.0; 2];
        jacobian_analytic(&CircleFactor, &[&x], &1.0, &0u8, 0, &mut analytic);
        assert_eq!(analytic, [4.0, 6.0]);

        jacobian_auto(&CircleFactor, &[&[0.0, 0.0]], &1.0, &0u8, 0, &mut auto);
        assert_eq!(auto, [0.0, 0.0]);
    }

    fn unary_graph<'a, S: Storage<f32>>(
        pts: &'a mut [[f32; 2]],
        mode: DifferentiationMode,
    ) -> Graph<'a, f32, S> {
        let n = pts.len();
        let mut graph = Graph::<f32, S>::new();
        let mut desc = VertexDescriptor::<f32, Point2>::new();
        for (i, p) in pts.iter_mut().enumerate() {
            desc.add_vertex(i as u64, p).unwrap();
        }
        let set = graph.add_vertex_descriptor(desc).unwrap();
        let mut f = FactorDescriptor::new(CircleFactor, &[set], mode).unwrap();
        for i in 0..n {
            f.add_factor(&graph, &[i as u64], 1.0, None, 0, Loss::Default).unwrap();
        }
        graph.add_factor_descriptor(f).unwrap();
        graph
    }

    #[test]
    fn byte_accounting() {
        let mut pts = vec![[0.5f32, 0.25]; 10];
        let g = unary_graph::<f32>(&mut pts, DifferentiationMode::Auto);
        let plan = g.activate(0);
        let store = materialize_jacobians(&g, &plan).unwrap();
        assert_eq!(store.block_count(&plan), 10);
        assert_eq!(store.jacobian_bytes(), 80);
        drop(g);

        let g = unary_graph::<bf16>(&mut pts, DifferentiationMode::Auto);
        let store = materialize_jacobians(&g, &g.activate(0)).unwrap();
        assert_eq!(store.jacobian_bytes(), 40);
        drop(g);

        let g = unary_graph::<f32>(&mut pts, DifferentiationMode::Dynamic);
        let store = materialize_jacobians(&g, &g.activate(0)).unwrap();
        assert_eq!(store.jacobian_bytes(), 0);
        assert!(store.is_dynamic(0));
    }

    #[test]
    fn non_finite_jacobian_is_flagged() {
        let mut pts = vec![[f32::NAN, 0.0]];
        let g = unary_graph::<f32>(&mut pts, DifferentiationMode::Auto);
        assert!(materialize_jacobians(&g, &g.activate(0)).is_none());
    }
}
