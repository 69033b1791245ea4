//! Activation: column packing, factor masking and the vertex incidence lists
//! that drive every deterministic reduction.

use super::factor::FactorSet;
use super::vertex::VertexSet;
use crate::precision::{Real, Storage};

/// Result of activating a graph at an optimisation level.
#[derive(Clone, Debug)]
pub struct ActivePlan {
    level: u8,
    total_free_dims: usize,
    total_residual_dims: usize,
    pub(crate) vertices: Vec<VertexPlan>,
    pub(crate) factors: Vec<FactorPlan>,
}

#[derive(Clone, Debug)]
pub(crate) struct VertexPlan {
    pub dim: usize,
    /// First global column of this descriptor's free vertices.
    pub base: usize,
    /// Per vertex, `usize::MAX` when fixed.
    pub column_offsets: Vec<usize>,
    /// Indices of free vertices, in insertion order.
    pub free: Vec<u32>,
    pub incidence: Vec<SlotIncidence>,
}

/// Active factors of one factor descriptor that reference this vertex
/// descriptor through one slot, grouped by free vertex (CSR layout).
#[derive(Clone, Debug)]
pub(crate) struct SlotIncidence {
    pub factor_set: usize,
    pub slot: usize,
    pub offsets: Vec<usize>,
    pub factors: Vec<u32>,
}

impl SlotIncidence {
    #[inline]
    pub fn factors_of(&self, free_rank: usize) -> &[u32] {
        &self.factors[self.offsets[free_rank]..self.offsets[free_rank + 1]]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FactorPlan {
    pub mask: Vec<bool>,
    /// Indices of active factors; position in this list is the active rank.
    pub active: Vec<u32>,
    pub residual_dim: usize,
    pub arity: usize,
    pub slot_dims: Vec<usize>,
    /// Per active rank and slot, the global column or `usize::MAX`.
    pub slot_columns: Vec<usize>,
    /// Contribution-buffer layout: offset of each slot within a factor.
    pub slot_offsets: Vec<usize>,
    pub stride: usize,
}

impl FactorPlan {
    #[inline]
    pub fn slot_column(&self, rank: usize, slot: usize) -> usize {
        self.slot_columns[rank * self.arity + slot]
    }

    #[inline]
    pub fn slot_free(&self, rank: usize, slot: usize) -> bool {
        self.slot_column(rank, slot) != usize::MAX
    }

    pub fn jacobian_stride(&self) -> usize {
        self.residual_dim * self.slot_dims.iter().sum::<usize>()
    }
}

impl ActivePlan {
    pub(crate) fn build<G: Real, S: Storage<G>>(
        vertex_sets: &[Box<dyn VertexSet<G> + '_>],
        factor_sets: &[Box<dyn FactorSet<G, S> + '_>],
        level: u8,
    ) -> Self {
        let mut next = 0usize;
        let mut vertices: Vec<VertexPlan> = vertex_sets
            .iter()
            .map(|vs| {
                let dim = vs.dimension();
                let base = next;
                let mut column_offsets = Vec::with_capacity(vs.len());
                let mut free = Vec::new();
                for i in 0..vs.len() {
                    if vs.fixed_at(i) {
                        column_offsets.push(usize::MAX);
                    } else {
                        column_offsets.push(next);
                        free.push(i as u32);
                        next += dim;
                    }
                }
                VertexPlan {
                    dim,
                    base,
                    column_offsets,
                    free,
                    incidence: Vec::new(),
                }
            })
            .collect();
        let total_free_dims = next;

        let mut total_residual_dims = 0;
        let mut factors = Vec::with_capacity(factor_sets.len());
        for (fs_index, fs) in factor_sets.iter().enumerate() {
            let slots = fs.slot_sets();
            let arity = slots.len();
            let slot_dims: Vec<usize> = slots.iter().map(|s| s.dimension).collect();
            let mut slot_offsets = Vec::with_capacity(arity);
            let mut stride = 0;
            for &d in &slot_dims {
                slot_offsets.push(stride);
                stride += d;
            }
            let mask: Vec<bool> = (0..fs.len()).map(|i| fs.level(i) <= level).collect();
            let active: Vec<u32> = (0..fs.len()).filter(|&i| mask[i]).map(|i| i as u32).collect();
            let mut slot_columns = Vec::with_capacity(active.len() * arity);
            for &i in &active {
                for (s, set) in slots.iter().enumerate() {
                    let v = fs.slot_vertex(i as usize, s);
                    slot_columns.push(vertices[set.index].column_offsets[v]);
                }
            }
            total_residual_dims += active.len() * fs.residual_dim();

            // incidence, one list per (factor descriptor, slot)
            for (s, set) in slots.iter().enumerate() {
                let vp = &mut vertices[set.index];
                let n = vp.column_offsets.len();
                let mut counts = vec![0usize; n];
                for &i in &active {
                    counts[fs.slot_vertex(i as usize, s)] += 1;
                }
                let mut offsets = Vec::with_capacity(vp.free.len() + 1);
                offsets.push(0);
                for &v in &vp.free {
                    offsets.push(offsets.last().unwrap() + counts[v as usize]);
                }
                // free rank of each vertex
                let mut rank_of = vec![usize::MAX; n];
                for (k, &v) in vp.free.iter().enumerate() {
                    rank_of[v as usize] = k;
                }
                let mut cursor = offsets.clone();
                let mut list = vec![0u32; *offsets.last().unwrap()];
                for (rank, &i) in active.iter().enumerate() {
                    let k = rank_of[fs.slot_vertex(i as usize, s)];
                    if k != usize::MAX {
                        list[cursor[k]] = rank as u32;
                        cursor[k] += 1;
                    }
                }
                vp.incidence.push(SlotIncidence {
                    factor_set: fs_index,
                    slot: s,
                    offsets,
                    factors: list,
                });
            }

            factors.push(FactorPlan {
                mask,
                active,
                residual_dim: fs.residual_dim(),
                arity,
                slot_dims,
                slot_columns,
                slot_offsets,
                stride,
            });
        }

        Self {
            level,
            total_free_dims,
            total_residual_dims,
            vertices,
            factors,
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn total_free_dims(&self) -> usize {
        self.total_free_dims
    }

    pub fn total_residual_dims(&self) -> usize {
        self.total_residual_dims
    }

    /// Global column of a vertex (by position within its descriptor), or
    /// `None` for fixed vertices.
    pub fn column_offset(&self, vertex_set: usize, vertex_index: usize) -> Option<usize> {
        let c = self.vertices[vertex_set].column_offsets[vertex_index];
        (c != usize::MAX).then_some(c)
    }

    pub fn column_offsets(&self, vertex_set: usize) -> Vec<Option<usize>> {
        self.vertices[vertex_set]
            .column_offsets
            .iter()
            .map(|&c| (c != usize::MAX).then_some(c))
            .collect()
    }

    pub fn factor_mask(&self, factor_set: usize) -> &[bool] {
        &self.factors[factor_set].mask
    }

    pub fn active_factor_count(&self) -> usize {
        self.factors.iter().map(|f| f.active.len()).sum()
    }

    /// Jacobian blocks held by a stored Jacobian: one per (active factor, slot).
    pub fn jacobian_block_count(&self) -> usize {
        self.factors.iter().map(|f| f.active.len() * f.arity).sum()
    }

    /// Scalars held by a stored Jacobian.
    pub fn jacobian_scalar_count(&self) -> usize {
        self.factors
            .iter()
            .map(|f| f.active.len() * f.jacobian_stride())
            .sum()
    }

    pub(crate) fn block_diagonal_len(&self) -> usize {
        self.vertices.iter().map(|v| v.free.len() * v.dim * v.dim).sum()
    }

    pub(crate) fn contribution_len(&self) -> usize {
        self.factors.iter().map(|f| f.active.len() * f.stride).sum()
    }
}
