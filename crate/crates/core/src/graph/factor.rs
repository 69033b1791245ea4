use std::marker::PhantomData;

use rayon::prelude::*;
use smallvec::SmallVec;

use super::loss::{mahalanobis, Loss};
use super::plan::{FactorPlan, SlotIncidence};
use super::{Graph, GraphError, ParamCache, VertexSetId};
use crate::differentiation::{jacobian_auto, DifferentiationMode, Number};
use crate::precision::{Real, Storage};

type Slices<'p, T> = SmallVec<[&'p [T]; 4]>;
type Buf<G> = SmallVec<[G; 32]>;

/// Describes one kind of constraint.
///
/// `residual` is generic over [`Number`] so the same definition is used for
/// plain evaluation and for dual-number differentiation.
pub trait FactorType<G: Real>: Send + Sync + 'static {
    const RESIDUAL_DIM: usize;
    /// Parameter-block dimension of each slot, in slot order.
    const SLOT_DIMS: &'static [usize];
    const HAS_ANALYTIC_JACOBIAN: bool = false;

    type Observation: Clone + Send + Sync + 'static;
    /// Non-optimisable per-factor payload. Use `u8` when unused.
    type Data: Clone + Send + Sync + 'static;

    fn residual<D: Number<G>>(
        &self,
        params: &[&[D]],
        observation: &Self::Observation,
        data: &Self::Data,
        out: &mut [D],
    );

    /// Row-major `RESIDUAL_DIM × SLOT_DIMS[slot]` block.
    ///
    /// Only called when `HAS_ANALYTIC_JACOBIAN` is true.
    fn analytic_jacobian(
        &self,
        _params: &[&[G]],
        _observation: &Self::Observation,
        _data: &Self::Data,
        _slot: usize,
        _out: &mut [G],
    ) {
        unimplemented!("factor type has no analytic Jacobian")
    }
}

/// Homogeneous batch of constraints of one type.
pub struct FactorDescriptor<G: Real, F: FactorType<G>> {
    factor: F,
    mode: DifferentiationMode,
    slot_sets: Vec<VertexSetId>,
    // vertex index (within the slot's descriptor) for every (factor, slot)
    slot_vertices: Vec<u32>,
    observations: Vec<F::Observation>,
    information: Vec<G>,
    data: Vec<F::Data>,
    losses: Vec<Loss<G>>,
    levels: Vec<u8>,
    _marker: PhantomData<fn() -> G>,
}

impl<G: Real, F: FactorType<G>> FactorDescriptor<G, F> {
    pub fn new(factor: F, slots: &[VertexSetId], mode: DifferentiationMode) -> Result<Self, GraphError> {
        if F::RESIDUAL_DIM == 0 {
            return Err(GraphError::ZeroResidualDimension);
        }
        if slots.len() != F::SLOT_DIMS.len() || slots.is_empty() {
            return Err(GraphError::SlotCountMismatch {
                expected: F::SLOT_DIMS.len(),
                got: slots.len(),
            });
        }
        for (slot, (set, &dim)) in slots.iter().zip(F::SLOT_DIMS).enumerate() {
            if set.dimension != dim {
                return Err(GraphError::SlotDimensionMismatch {
                    slot,
                    expected: dim,
                    got: set.dimension,
                });
            }
        }
        if mode == DifferentiationMode::Analytic && !F::HAS_ANALYTIC_JACOBIAN {
            return Err(GraphError::MissingAnalyticJacobian {
                factor: std::any::type_name::<F>(),
            });
        }
        Ok(Self {
            factor,
            mode,
            slot_sets: slots.to_vec(),
            slot_vertices: Vec::new(),
            observations: Vec::new(),
            information: Vec::new(),
            data: Vec::new(),
            losses: Vec::new(),
            levels: Vec::new(),
            _marker: PhantomData,
        })
    }

    pub fn reserve(&mut self, n: usize) {
        let rd = F::RESIDUAL_DIM;
        self.slot_vertices.reserve(n * self.slot_sets.len());
        self.observations.reserve(n);
        self.information.reserve(n * rd * rd);
        self.data.reserve(n);
        self.losses.reserve(n);
        self.levels.reserve(n);
    }

    /// Appends a factor at level 0. `information` defaults to identity.
    pub fn add_factor<S: Storage<G>>(
        &mut self,
        graph: &Graph<'_, G, S>,
        vertex_ids: &[u64],
        observation: F::Observation,
        information: Option<&[G]>,
        data: F::Data,
        loss: Loss<G>,
    ) -> Result<usize, GraphError> {
        let arity = self.slot_sets.len();
        if vertex_ids.len() != arity {
            return Err(GraphError::SlotCountMismatch {
                expected: arity,
                got: vertex_ids.len(),
            });
        }
        let rd = F::RESIDUAL_DIM;
        if let Some(info) = information {
            check_information(info, rd)?;
        }
        let mut resolved: SmallVec<[u32; 4]> = SmallVec::new();
        for (slot, (&id, set)) in vertex_ids.iter().zip(&self.slot_sets).enumerate() {
            let idx = graph
                .vertex_index(*set, id)
                .ok_or(GraphError::DanglingVertex { slot, id })?;
            resolved.push(idx as u32);
        }
        self.slot_vertices.extend_from_slice(&resolved);
        self.observations.push(observation);
        match information {
            Some(info) => self.information.extend_from_slice(info),
            None => {
                for i in 0..rd {
                    for j in 0..rd {
                        self.information.push(if i == j { G::one() } else { G::zero() });
                    }
                }
            }
        }
        self.data.push(data);
        self.losses.push(loss);
        self.levels.push(0);
        Ok(self.levels.len() - 1)
    }

    pub fn set_level(&mut self, factor_index: usize, level: u8) -> Result<(), GraphError> {
        let len = self.levels.len();
        let slot = self
            .levels
            .get_mut(factor_index)
            .ok_or(GraphError::FactorIndexOutOfRange { index: factor_index, len })?;
        *slot = level;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn information(&self, factor_index: usize) -> &[G] {
        let rd2 = F::RESIDUAL_DIM * F::RESIDUAL_DIM;
        &self.information[factor_index * rd2..(factor_index + 1) * rd2]
    }

    pub fn level(&self, factor_index: usize) -> u8 {
        self.levels[factor_index]
    }

    pub fn mode(&self) -> DifferentiationMode {
        self.mode
    }

    fn arity(&self) -> usize {
        self.slot_sets.len()
    }

    fn slot_params<'p>(&self, params: &'p ParamCache<G>, i: usize) -> Slices<'p, G> {
        let arity = self.arity();
        self.slot_sets
            .iter()
            .enumerate()
            .map(|(s, set)| {
                let v = self.slot_vertices[i * arity + s] as usize;
                params.block(set.index, v, set.dimension)
            })
            .collect()
    }

    fn eval_residual(&self, p: &[&[G]], i: usize, out: &mut [G]) {
        self.factor.residual(p, &self.observations[i], &self.data[i], out);
    }

    /// Jacobian at graph precision, respecting the differentiation mode.
    fn eval_jacobian(&self, p: &[&[G]], i: usize, slot: usize, out: &mut [G]) {
        let use_analytic = match self.mode {
            DifferentiationMode::Analytic => true,
            DifferentiationMode::Auto => false,
            DifferentiationMode::Dynamic => F::HAS_ANALYTIC_JACOBIAN,
        };
        if use_analytic {
            self.factor
                .analytic_jacobian(p, &self.observations[i], &self.data[i], slot, out);
        } else {
            jacobian_auto(&self.factor, p, &self.observations[i], &self.data[i], slot, out);
        }
    }

    fn jacobian_stride(&self) -> usize {
        F::RESIDUAL_DIM * F::SLOT_DIMS.iter().sum::<usize>()
    }

    fn jacobian_slot_offset(&self, slot: usize) -> usize {
        F::RESIDUAL_DIM * F::SLOT_DIMS[..slot].iter().sum::<usize>()
    }

    /// Loads or recomputes the `slot` block of active factor `rank`.
    #[inline]
    fn slot_jacobian<S: Storage<G>>(
        &self,
        p: &[&[G]],
        i: usize,
        slot: usize,
        stored: Option<&[S]>,
        out: &mut [G],
    ) {
        match stored {
            Some(factor_blocks) => {
                let off = self.jacobian_slot_offset(slot);
                let len = out.len();
                for (o, s) in out.iter_mut().zip(&factor_blocks[off..off + len]) {
                    *o = s.load();
                }
            }
            None => self.eval_jacobian(p, i, slot, out),
        }
    }
}

fn check_information<G: Real>(info: &[G], rd: usize) -> Result<(), GraphError> {
    if info.len() != rd * rd {
        return Err(GraphError::InformationShape {
            expected: rd * rd,
            got: info.len(),
        });
    }
    for i in 0..rd {
        if !(info[i * rd + i] >= G::zero()) {
            return Err(GraphError::InformationNotPsd);
        }
        for j in 0..i {
            let (a, b) = (info[i * rd + j], info[j * rd + i]);
            let scale = a.abs().max(b.abs()).max(G::min_positive_value());
            if (a - b).abs() > scale * G::lit(1e-6) {
                return Err(GraphError::InformationNotSymmetric);
            }
        }
    }
    Ok(())
}

/// Type-erased view of a factor descriptor; all methods process the whole
/// batch of active factors in one call.
pub(crate) trait FactorSet<G: Real, S: Storage<G>>: Send + Sync {
    fn residual_dim(&self) -> usize;
    fn slot_sets(&self) -> &[VertexSetId];
    fn len(&self) -> usize;
    fn level(&self, i: usize) -> u8;
    fn set_level(&mut self, i: usize, level: u8) -> Result<(), GraphError>;
    fn slot_vertex(&self, i: usize, slot: usize) -> usize;
    fn mode(&self) -> DifferentiationMode;
    fn information_at(&self, i: usize) -> &[G];
    fn storage_bytes(&self) -> usize;

    fn residual_at(&self, params: &ParamCache<G>, i: usize, out: &mut [G]);
    fn jacobian_at(&self, params: &ParamCache<G>, i: usize, slot: usize, out: &mut [G]);

    /// `ρ(rᵀΩr)` for each active factor.
    fn chi2_terms(&self, params: &ParamCache<G>, plan: &FactorPlan, out: &mut [G]);
    /// Loss-free unweighted `‖r‖²` for each active factor.
    fn raw_squared_norms(&self, params: &ParamCache<G>, plan: &FactorPlan, out: &mut [G]);

    /// Residuals and IRLS weights for every active factor, and the stored
    /// Jacobian blocks when `jacobians` is present. Returns false on a
    /// non-finite entry.
    fn linearize(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        residuals: &mut [G],
        weights: &mut [G],
        jacobians: Option<&mut [S]>,
    ) -> bool;

    /// Per-slot `J_sᵀ w Ω r` into the contribution buffer.
    fn gradient_contrib(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        residuals: &[G],
        weights: &[G],
        jacobians: Option<&[S]>,
        contrib: &mut [G],
    );

    /// Per-slot `J_sᵀ w Ω (Σ_t J_t x_t)` into the contribution buffer, where
    /// `x` is the global vector.
    fn hvp_contrib(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        weights: &[G],
        jacobians: Option<&[S]>,
        x: &[G],
        contrib: &mut [G],
    );

    /// Adds `J_sᵀ w Ω J_s` for every incident factor to the per-vertex blocks.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_blocks(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        weights: &[G],
        jacobians: Option<&[S]>,
        incidence: &SlotIncidence,
        dim: usize,
        blocks: &mut [G],
    );
}

impl<G: Real, S: Storage<G>, F: FactorType<G>> FactorSet<G, S> for FactorDescriptor<G, F> {
    fn residual_dim(&self) -> usize {
        F::RESIDUAL_DIM
    }

    fn slot_sets(&self) -> &[VertexSetId] {
        &self.slot_sets
    }

    fn len(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, i: usize) -> u8 {
        self.levels[i]
    }

    fn set_level(&mut self, i: usize, level: u8) -> Result<(), GraphError> {
        FactorDescriptor::set_level(self, i, level)
    }

    fn slot_vertex(&self, i: usize, slot: usize) -> usize {
        self.slot_vertices[i * self.arity() + slot] as usize
    }

    fn mode(&self) -> DifferentiationMode {
        self.mode
    }

    fn information_at(&self, i: usize) -> &[G] {
        self.information(i)
    }

    fn storage_bytes(&self) -> usize {
        let n = self.len();
        let rd = F::RESIDUAL_DIM;
        n * (self.arity() * std::mem::size_of::<u32>()
            + std::mem::size_of::<F::Observation>()
            + rd * rd * G::BYTES
            + std::mem::size_of::<F::Data>()
            + std::mem::size_of::<Loss<G>>()
            + 1)
    }

    fn residual_at(&self, params: &ParamCache<G>, i: usize, out: &mut [G]) {
        let p = self.slot_params(params, i);
        self.eval_residual(&p, i, out);
    }

    fn jacobian_at(&self, params: &ParamCache<G>, i: usize, slot: usize, out: &mut [G]) {
        let p = self.slot_params(params, i);
        self.eval_jacobian(&p, i, slot, out);
    }

    fn chi2_terms(&self, params: &ParamCache<G>, plan: &FactorPlan, out: &mut [G]) {
        let rd = F::RESIDUAL_DIM;
        out.par_iter_mut()
            .zip(plan.active.par_iter())
            .for_each(|(o, &i)| {
                let i = i as usize;
                let p = self.slot_params(params, i);
                let mut r: Buf<G> = SmallVec::from_elem(G::zero(), rd);
                self.eval_residual(&p, i, &mut r);
                let s = mahalanobis(&r, self.information(i));
                *o = self.losses[i].rho(s);
            });
    }

    fn raw_squared_norms(&self, params: &ParamCache<G>, plan: &FactorPlan, out: &mut [G]) {
        let rd = F::RESIDUAL_DIM;
        out.par_iter_mut()
            .zip(plan.active.par_iter())
            .for_each(|(o, &i)| {
                let i = i as usize;
                let p = self.slot_params(params, i);
                let mut r: Buf<G> = SmallVec::from_elem(G::zero(), rd);
                self.eval_residual(&p, i, &mut r);
                *o = r.iter().fold(G::zero(), |acc, &x| acc + x * x);
            });
    }

    fn linearize(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        residuals: &mut [G],
        weights: &mut [G],
        jacobians: Option<&mut [S]>,
    ) -> bool {
        let rd = F::RESIDUAL_DIM;
        let finite_r = residuals
            .par_chunks_mut(rd)
            .zip(weights.par_iter_mut())
            .zip(plan.active.par_iter())
            .map(|((r, w), &i)| {
                let i = i as usize;
                let p = self.slot_params(params, i);
                self.eval_residual(&p, i, r);
                let s = mahalanobis(r, self.information(i));
                *w = self.losses[i].weight(s);
                r.iter().all(|x| x.is_finite()) && w.is_finite()
            })
            .reduce(|| true, |a, b| a && b);
        let finite_j = match jacobians {
            None => true,
            Some(store) => {
                let stride = self.jacobian_stride();
                store
                    .par_chunks_mut(stride)
                    .zip(plan.active.par_iter())
                    .map(|(blocks, &i)| {
                        let i = i as usize;
                        let p = self.slot_params(params, i);
                        let mut ok = true;
                        let mut buf: Buf<G> = SmallVec::new();
                        for (slot, &d) in F::SLOT_DIMS.iter().enumerate() {
                            buf.clear();
                            buf.resize(rd * d, G::zero());
                            self.eval_jacobian(&p, i, slot, &mut buf);
                            let off = self.jacobian_slot_offset(slot);
                            for (dst, &v) in blocks[off..off + rd * d].iter_mut().zip(&buf) {
                                ok &= v.is_finite();
                                *dst = S::store(v);
                            }
                        }
                        ok
                    })
                    .reduce(|| true, |a, b| a && b)
            }
        };
        finite_r && finite_j
    }

    fn gradient_contrib(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        residuals: &[G],
        weights: &[G],
        jacobians: Option<&[S]>,
        contrib: &mut [G],
    ) {
        let rd = F::RESIDUAL_DIM;
        let jstride = self.jacobian_stride();
        contrib
            .par_chunks_mut(plan.stride)
            .enumerate()
            .for_each(|(rank, out)| {
                let i = plan.active[rank] as usize;
                let p = self.slot_params(params, i);
                let r = &residuals[rank * rd..(rank + 1) * rd];
                let info = self.information(i);
                let w = weights[rank];
                // y = w Ω r
                let mut y: Buf<G> = SmallVec::from_elem(G::zero(), rd);
                for a in 0..rd {
                    let mut acc = G::zero();
                    for b in 0..rd {
                        acc += info[a * rd + b] * r[b];
                    }
                    y[a] = w * acc;
                }
                let stored = jacobians.map(|j| &j[rank * jstride..(rank + 1) * jstride]);
                let mut jac: Buf<G> = SmallVec::new();
                for (slot, &d) in F::SLOT_DIMS.iter().enumerate() {
                    if !plan.slot_free(rank, slot) {
                        continue;
                    }
                    jac.clear();
                    jac.resize(rd * d, G::zero());
                    self.slot_jacobian(&p, i, slot, stored, &mut jac);
                    let dst = &mut out[plan.slot_offsets[slot]..plan.slot_offsets[slot] + d];
                    for (c, o) in dst.iter_mut().enumerate() {
                        let mut acc = G::zero();
                        for a in 0..rd {
                            acc += jac[a * d + c] * y[a];
                        }
                        *o = acc;
                    }
                }
            });
    }

    fn hvp_contrib(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        weights: &[G],
        jacobians: Option<&[S]>,
        x: &[G],
        contrib: &mut [G],
    ) {
        let rd = F::RESIDUAL_DIM;
        let jstride = self.jacobian_stride();
        let arity = self.arity();
        contrib
            .par_chunks_mut(plan.stride)
            .enumerate()
            .for_each(|(rank, out)| {
                let i = plan.active[rank] as usize;
                let stored = jacobians.map(|j| &j[rank * jstride..(rank + 1) * jstride]);
                // only recompute parameter slices when Jacobians are dynamic
                let p = if stored.is_none() {
                    self.slot_params(params, i)
                } else {
                    SmallVec::new()
                };
                let mut jac: SmallVec<[Buf<G>; 4]> = SmallVec::with_capacity(arity);
                let mut u: Buf<G> = SmallVec::from_elem(G::zero(), rd);
                for (slot, &d) in F::SLOT_DIMS.iter().enumerate() {
                    let mut block: Buf<G> = SmallVec::new();
                    let col = plan.slot_column(rank, slot);
                    if col != usize::MAX {
                        block.resize(rd * d, G::zero());
                        self.slot_jacobian(&p, i, slot, stored, &mut block);
                        let xs = &x[col..col + d];
                        for a in 0..rd {
                            let mut acc = G::zero();
                            for c in 0..d {
                                acc += block[a * d + c] * xs[c];
                            }
                            u[a] += acc;
                        }
                    }
                    jac.push(block);
                }
                let info = self.information(i);
                let w = weights[rank];
                let mut y: Buf<G> = SmallVec::from_elem(G::zero(), rd);
                for a in 0..rd {
                    let mut acc = G::zero();
                    for b in 0..rd {
                        acc += info[a * rd + b] * u[b];
                    }
                    y[a] = w * acc;
                }
                for (slot, &d) in F::SLOT_DIMS.iter().enumerate() {
                    let block = &jac[slot];
                    if block.is_empty() {
                        continue;
                    }
                    let dst = &mut out[plan.slot_offsets[slot]..plan.slot_offsets[slot] + d];
                    for (c, o) in dst.iter_mut().enumerate() {
                        let mut acc = G::zero();
                        for a in 0..rd {
                            acc += block[a * d + c] * y[a];
                        }
                        *o = acc;
                    }
                }
            });
    }

    fn accumulate_blocks(
        &self,
        params: &ParamCache<G>,
        plan: &FactorPlan,
        weights: &[G],
        jacobians: Option<&[S]>,
        incidence: &SlotIncidence,
        dim: usize,
        blocks: &mut [G],
    ) {
        let rd = F::RESIDUAL_DIM;
        let slot = incidence.slot;
        let jstride = self.jacobian_stride();
        blocks
            .par_chunks_mut(dim * dim)
            .enumerate()
            .for_each(|(k, out)| {
                let mut jac: Buf<G> = SmallVec::from_elem(G::zero(), rd * dim);
                let mut wj: Buf<G> = SmallVec::from_elem(G::zero(), rd * dim);
                for &rank in incidence.factors_of(k) {
                    let rank = rank as usize;
                    let i = plan.active[rank] as usize;
                    let stored = jacobians.map(|j| &j[rank * jstride..(rank + 1) * jstride]);
                    let p = if stored.is_none() {
                        self.slot_params(params, i)
                    } else {
                        SmallVec::new()
                    };
                    self.slot_jacobian(&p, i, slot, stored, &mut jac);
                    // a vertex filling several slots sees the sum of their blocks;
                    // summed over its incidences this yields (ΣJ)ᵀΩ(ΣJ)
                    let mut right: Option<Buf<G>> = None;
                    let ids = &self.slot_vertices[i * self.arity()..(i + 1) * self.arity()];
                    for t in (0..self.arity()).filter(|&t| t != slot) {
                        if self.slot_sets[t] == self.slot_sets[slot] && ids[t] == ids[slot] {
                            let sum = right.get_or_insert_with(|| jac.clone());
                            let mut other: Buf<G> = SmallVec::from_elem(G::zero(), rd * dim);
                            self.slot_jacobian(&p, i, t, stored, &mut other);
                            sum.iter_mut().zip(&other).for_each(|(a, &b)| *a += b);
                        }
                    }
                    let rj = right.as_deref().unwrap_or(&jac);
                    let info = self.information(i);
                    let w = weights[rank];
                    // wj = w Ω J
                    for a in 0..rd {
                        for c in 0..dim {
                            let mut acc = G::zero();
                            for b in 0..rd {
                                acc += info[a * rd + b] * rj[b * dim + c];
                            }
                            wj[a * dim + c] = w * acc;
                        }
                    }
                    for r in 0..dim {
                        for c in 0..dim {
                            let mut acc = G::zero();
                            for a in 0..rd {
                                acc += jac[a * dim + r] * wj[a * dim + c];
                            }
                            out[r * dim + c] += acc;
                        }
                    }
                }
            });
    }
}
