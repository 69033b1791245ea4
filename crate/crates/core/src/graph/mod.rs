//! Batched graph data model.
//!
//! Vertices and factors are registered in homogeneous batches
//! ([`VertexDescriptor`], [`FactorDescriptor`]). Every operation over the
//! graph dispatches once per descriptor and then runs a data-parallel loop
//! over the items of that descriptor.

mod factor;
mod loss;
mod plan;
mod vertex;

pub use factor::{FactorDescriptor, FactorType};
pub use loss::{apply_loss_weighting, Loss};
pub use plan::ActivePlan;
pub use vertex::{VertexDescriptor, VertexType};

pub(crate) use factor::FactorSet;
pub(crate) use vertex::VertexSet;

use std::any::Any;

use crate::precision::{PrecisionPair, Real, Storage};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("vertex id {id} already present in descriptor")]
    DuplicateVertex { id: u64 },
    #[error("unknown vertex id {id}")]
    UnknownVertex { id: u64 },
    #[error("slot {slot} references vertex id {id}, which does not exist")]
    DanglingVertex { slot: usize, id: u64 },
    #[error("factor index {index} out of range (descriptor holds {len})")]
    FactorIndexOutOfRange { index: usize, len: usize },
    #[error("expected {expected} slots, got {got}")]
    SlotCountMismatch { expected: usize, got: usize },
    #[error("slot {slot} expects a {expected}-dimensional vertex descriptor, got {got}")]
    SlotDimensionMismatch { slot: usize, expected: usize, got: usize },
    #[error("factor type {factor} has no analytic Jacobian")]
    MissingAnalyticJacobian { factor: &'static str },
    #[error("residual dimension must be at least 1")]
    ZeroResidualDimension,
    #[error("vertex dimension must be at least 1")]
    ZeroVertexDimension,
    #[error("information matrix has {got} entries, expected {expected}")]
    InformationShape { expected: usize, got: usize },
    #[error("information matrix is not symmetric")]
    InformationNotSymmetric,
    #[error("information matrix has a negative diagonal entry")]
    InformationNotPsd,
    #[error("descriptor {index} is not registered in this graph")]
    UnknownDescriptor { index: usize },
}

/// Handle of a registered vertex descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VertexSetId {
    pub(crate) index: usize,
    pub(crate) dimension: usize,
}

impl VertexSetId {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

/// Handle of a registered factor descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FactorSetId {
    pub(crate) index: usize,
}

impl FactorSetId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Flat parameter blocks of every vertex, one buffer per vertex descriptor.
#[derive(Clone, Debug, Default)]
pub(crate) struct ParamCache<G> {
    blocks: Vec<Vec<G>>,
}

impl<G: Real> ParamCache<G> {
    #[inline]
    pub fn block(&self, set: usize, vertex: usize, dim: usize) -> &[G] {
        &self.blocks[set][vertex * dim..(vertex + 1) * dim]
    }
}

/// The optimisation problem: typed vertex and factor descriptors.
///
/// `G` is the graph precision, `S` the linear-system storage precision.
pub struct Graph<'a, G: Real, S: Storage<G>> {
    pub(crate) vertex_sets: Vec<Box<dyn VertexSet<G> + 'a>>,
    pub(crate) factor_sets: Vec<Box<dyn FactorSet<G, S> + 'a>>,
}

impl<'a, G: Real, S: Storage<G>> Default for Graph<'a, G, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, G: Real, S: Storage<G>> Graph<'a, G, S> {
    pub fn new() -> Self {
        Self {
            vertex_sets: Vec::new(),
            factor_sets: Vec::new(),
        }
    }

    pub fn precision(&self) -> PrecisionPair {
        PrecisionPair::of::<G, S>()
    }

    pub fn add_vertex_descriptor<T: VertexType<G>>(
        &mut self,
        descriptor: VertexDescriptor<'a, G, T>,
    ) -> Result<VertexSetId, GraphError> {
        if T::DIMENSION == 0 {
            return Err(GraphError::ZeroVertexDimension);
        }
        self.vertex_sets.push(Box::new(descriptor));
        Ok(VertexSetId {
            index: self.vertex_sets.len() - 1,
            dimension: T::DIMENSION,
        })
    }

    pub fn add_factor_descriptor<F: FactorType<G>>(
        &mut self,
        descriptor: FactorDescriptor<G, F>,
    ) -> Result<FactorSetId, GraphError> {
        for set in FactorSet::<G, S>::slot_sets(&descriptor) {
            match self.vertex_sets.get(set.index) {
                Some(vs) if vs.dimension() == set.dimension => {}
                _ => return Err(GraphError::UnknownDescriptor { index: set.index }),
            }
        }
        self.factor_sets.push(Box::new(descriptor));
        Ok(FactorSetId {
            index: self.factor_sets.len() - 1,
        })
    }

    /// Position of `vertex_id` within its descriptor.
    pub fn vertex_index(&self, set: VertexSetId, vertex_id: u64) -> Option<usize> {
        self.vertex_sets.get(set.index)?.index_of(vertex_id)
    }

    pub fn set_fixed(&mut self, set: VertexSetId, vertex_id: u64, fixed: bool) -> Result<(), GraphError> {
        self.vertex_sets
            .get_mut(set.index)
            .ok_or(GraphError::UnknownDescriptor { index: set.index })?
            .set_fixed(vertex_id, fixed)
    }

    pub fn is_fixed(&self, set: VertexSetId, vertex_id: u64) -> Option<bool> {
        let vs = self.vertex_sets.get(set.index)?;
        vs.index_of(vertex_id).map(|i| vs.fixed_at(i))
    }

    pub fn set_level(&mut self, set: FactorSetId, factor_index: usize, level: u8) -> Result<(), GraphError> {
        self.factor_sets
            .get_mut(set.index)
            .ok_or(GraphError::UnknownDescriptor { index: set.index })?
            .set_level(factor_index, level)
    }

    pub fn level(&self, set: FactorSetId, factor_index: usize) -> Option<u8> {
        let fs = self.factor_sets.get(set.index)?;
        (factor_index < fs.len()).then(|| fs.level(factor_index))
    }

    pub fn vertex_descriptor_count(&self) -> usize {
        self.vertex_sets.len()
    }

    pub fn factor_descriptor_count(&self) -> usize {
        self.factor_sets.len()
    }

    pub fn vertex_count(&self, set: VertexSetId) -> usize {
        self.vertex_sets[set.index].len()
    }

    pub fn factor_count(&self, set: FactorSetId) -> usize {
        self.factor_sets[set.index].len()
    }

    pub fn vertex_id_at(&self, set: VertexSetId, index: usize) -> u64 {
        self.vertex_sets[set.index].id_at(index)
    }

    /// Assigns columns to free vertices and masks factors above `level`.
    pub fn activate(&self, level: u8) -> ActivePlan {
        ActivePlan::build(&self.vertex_sets, &self.factor_sets, level)
    }

    pub(crate) fn gather_parameters(&self, cache: &mut ParamCache<G>) {
        cache.blocks.resize_with(self.vertex_sets.len(), Vec::new);
        for (vs, buf) in self.vertex_sets.iter().zip(cache.blocks.iter_mut()) {
            buf.resize(vs.len() * vs.dimension(), G::zero());
            vs.gather(buf);
        }
    }

    pub(crate) fn parameters(&self) -> ParamCache<G> {
        let mut cache = ParamCache { blocks: Vec::new() };
        self.gather_parameters(&mut cache);
        cache
    }

    /// Parameter block of one vertex.
    pub fn vertex_parameters(&self, set: VertexSetId, vertex_id: u64) -> Option<Vec<G>> {
        let vs = self.vertex_sets.get(set.index)?;
        let i = vs.index_of(vertex_id)?;
        let mut all = vec![G::zero(); vs.len() * vs.dimension()];
        vs.gather(&mut all);
        let d = vs.dimension();
        Some(all[i * d..(i + 1) * d].to_vec())
    }

    /// Residual of one factor at the current parameters.
    pub fn residual(&self, set: FactorSetId, factor_index: usize) -> Vec<G> {
        let params = self.parameters();
        let fs = &self.factor_sets[set.index];
        let mut r = vec![G::zero(); fs.residual_dim()];
        fs.residual_at(&params, factor_index, &mut r);
        r
    }

    /// Jacobian block of one factor with respect to one slot.
    pub fn jacobian(&self, set: FactorSetId, factor_index: usize, slot: usize) -> Vec<G> {
        let params = self.parameters();
        let fs = &self.factor_sets[set.index];
        let d = fs.slot_sets()[slot].dimension;
        let mut j = vec![G::zero(); fs.residual_dim() * d];
        fs.jacobian_at(&params, factor_index, slot, &mut j);
        j
    }

    /// `Σ ρ(rᵀΩr)` over factors with level `<= level`.
    pub fn total_error(&self, level: u8) -> G {
        let plan = self.activate(level);
        let params = self.parameters();
        self.chi2(&plan, &params)
    }

    pub(crate) fn chi2(&self, plan: &ActivePlan, params: &ParamCache<G>) -> G {
        let mut total = G::zero();
        let mut terms = Vec::new();
        for (fs, fp) in self.factor_sets.iter().zip(&plan.factors) {
            terms.clear();
            terms.resize(fp.active.len(), G::zero());
            fs.chi2_terms(params, fp, &mut terms);
            // sequential sum: independent of the worker count
            for &t in &terms {
                total += t;
            }
        }
        total
    }

    /// Loss-free, unweighted `Σ ‖r‖²` over active factors.
    pub fn raw_squared_error(&self, level: u8) -> G {
        let plan = self.activate(level);
        let params = self.parameters();
        let mut total = G::zero();
        let mut terms = Vec::new();
        for (fs, fp) in self.factor_sets.iter().zip(&plan.factors) {
            terms.clear();
            terms.resize(fp.active.len(), G::zero());
            fs.raw_squared_norms(&params, fp, &mut terms);
            for &t in &terms {
                total += t;
            }
        }
        total
    }

    pub(crate) fn apply_step(&mut self, plan: &ActivePlan, delta: &[G]) {
        for (vs, vp) in self.vertex_sets.iter_mut().zip(&plan.vertices) {
            vs.apply_step(&vp.column_offsets, delta);
        }
    }

    pub(crate) fn snapshot(&self, plan: &ActivePlan) -> Snapshot {
        Snapshot {
            sets: self
                .vertex_sets
                .iter()
                .zip(&plan.vertices)
                .map(|(vs, vp)| vs.snapshot(&vp.column_offsets))
                .collect(),
        }
    }

    pub(crate) fn restore(&mut self, snapshot: &Snapshot) {
        for (vs, snap) in self.vertex_sets.iter_mut().zip(&snapshot.sets) {
            vs.restore(snap.as_ref());
        }
    }

    /// Bytes held by descriptors (ids, flags, observations, information,
    /// payloads, losses, levels).
    pub fn storage_bytes(&self) -> usize {
        self.vertex_sets.iter().map(|v| v.vertex_bytes()).sum::<usize>()
            + self.factor_sets.iter().map(|f| f.storage_bytes()).sum::<usize>()
    }

    /// Information matrix of one factor, row-major.
    pub fn information(&self, set: FactorSetId, factor_index: usize) -> &[G] {
        self.factor_sets[set.index].information_at(factor_index)
    }
}

/// Copies of every free vertex, taken before a candidate step.
pub struct Snapshot {
    sets: Vec<Box<dyn Any + Send>>,
}

impl<'a, G: Real, S: Storage<G>> Graph<'a, G, S> {
    /// Copies every free vertex at the given activation.
    pub fn take_snapshot(&self, plan: &ActivePlan) -> Snapshot {
        self.snapshot(plan)
    }

    /// Writes the snapshot back by direct assignment.
    pub fn restore_snapshot(&mut self, snapshot: &Snapshot) {
        self.restore(snapshot)
    }

    /// Applies a global step through each descriptor's update rule.
    pub fn apply_update(&mut self, plan: &ActivePlan, delta: &[G]) {
        assert_eq!(delta.len(), plan.total_free_dims());
        self.apply_step(plan, delta)
    }
}
