use std::any::Any;
use std::collections::HashMap;
use std::marker::PhantomData;

use rayon::prelude::*;

use super::GraphError;
use crate::precision::Real;

/// Describes one kind of optimisable variable.
///
/// The vertex value itself is owned by the caller; descriptors only hold
/// mutable borrows and refine the values in place.
pub trait VertexType<G: Real>: Send + Sync + 'static {
    type Vertex: Clone + Send + Sync + 'static;

    /// Length of the parameter block (tangent dimension).
    const DIMENSION: usize;

    /// Writes the parameter block into `out` (`DIMENSION` scalars).
    fn parameters(vertex: &Self::Vertex, out: &mut [G]);

    /// Applies a step of `DIMENSION` scalars in place.
    fn update(vertex: &mut Self::Vertex, delta: &[G]);
}

/// Homogeneous batch of vertices of one type.
pub struct VertexDescriptor<'a, G: Real, T: VertexType<G>> {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    handles: Vec<&'a mut T::Vertex>,
    fixed: Vec<bool>,
    _marker: PhantomData<fn() -> (G, T)>,
}

impl<'a, G: Real, T: VertexType<G>> Default for VertexDescriptor<'a, G, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, G: Real, T: VertexType<G>> VertexDescriptor<'a, G, T> {
    pub fn new() -> Self {
        Self {
            ids: Vec::new(),
            index: HashMap::new(),
            handles: Vec::new(),
            fixed: Vec::new(),
            _marker: PhantomData,
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        let mut d = Self::new();
        d.reserve(n);
        d
    }

    pub fn reserve(&mut self, n: usize) {
        self.ids.reserve(n);
        self.index.reserve(n);
        self.handles.reserve(n);
        self.fixed.reserve(n);
    }

    /// Registers a vertex. New vertices are free.
    pub fn add_vertex(&mut self, vertex_id: u64, handle: &'a mut T::Vertex) -> Result<(), GraphError> {
        if self.index.contains_key(&vertex_id) {
            return Err(GraphError::DuplicateVertex { id: vertex_id });
        }
        self.index.insert(vertex_id, self.ids.len());
        self.ids.push(vertex_id);
        self.handles.push(handle);
        self.fixed.push(false);
        Ok(())
    }

    pub fn set_fixed(&mut self, vertex_id: u64, fixed: bool) -> Result<(), GraphError> {
        let i = *self.index.get(&vertex_id).ok_or(GraphError::UnknownVertex { id: vertex_id })?;
        self.fixed[i] = fixed;
        Ok(())
    }

    pub fn is_fixed(&self, vertex_id: u64) -> Option<bool> {
        self.index.get(&vertex_id).map(|&i| self.fixed[i])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vertex(&self, vertex_id: u64) -> Option<&T::Vertex> {
        self.index.get(&vertex_id).map(|&i| &*self.handles[i])
    }
}

/// Type-erased view of a vertex descriptor; one dynamic call per batch.
pub(crate) trait VertexSet<G: Real>: Send + Sync {
    fn dimension(&self) -> usize;
    fn len(&self) -> usize;
    fn index_of(&self, id: u64) -> Option<usize>;
    fn id_at(&self, index: usize) -> u64;
    fn fixed_at(&self, index: usize) -> bool;
    fn set_fixed(&mut self, id: u64, fixed: bool) -> Result<(), GraphError>;

    /// Parameters of every vertex, `len × dimension`, in insertion order.
    fn gather(&self, out: &mut [G]);
    /// Applies `delta` to each vertex whose column offset is not `usize::MAX`.
    fn apply_step(&mut self, column_offsets: &[usize], delta: &[G]);
    fn snapshot(&self, column_offsets: &[usize]) -> Box<dyn Any + Send>;
    fn restore(&mut self, snapshot: &(dyn Any + Send));
    fn vertex_bytes(&self) -> usize;
}

impl<'a, G: Real, T: VertexType<G>> VertexSet<G> for VertexDescriptor<'a, G, T> {
    fn dimension(&self) -> usize {
        T::DIMENSION
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    fn id_at(&self, index: usize) -> u64 {
        self.ids[index]
    }

    fn fixed_at(&self, index: usize) -> bool {
        self.fixed[index]
    }

    fn set_fixed(&mut self, id: u64, fixed: bool) -> Result<(), GraphError> {
        VertexDescriptor::set_fixed(self, id, fixed)
    }

    fn gather(&self, out: &mut [G]) {
        let d = T::DIMENSION;
        debug_assert_eq!(out.len(), self.handles.len() * d);
        if d == 0 {
            return;
        }
        out.par_chunks_mut(d)
            .zip(self.handles.par_iter())
            .for_each(|(block, v)| T::parameters(v, block));
    }

    fn apply_step(&mut self, column_offsets: &[usize], delta: &[G]) {
        let d = T::DIMENSION;
        self.handles
            .par_iter_mut()
            .zip(column_offsets.par_iter())
            .for_each(|(v, &col)| {
                if col != usize::MAX {
                    T::update(v, &delta[col..col + d]);
                }
            });
    }

    fn snapshot(&self, column_offsets: &[usize]) -> Box<dyn Any + Send> {
        let saved: Vec<(usize, T::Vertex)> = self
            .handles
            .iter()
            .zip(column_offsets)
            .enumerate()
            .filter(|(_, (_, &col))| col != usize::MAX)
            .map(|(i, (v, _))| (i, (**v).clone()))
            .collect();
        Box::new(saved)
    }

    fn restore(&mut self, snapshot: &(dyn Any + Send)) {
        let saved = snapshot
            .downcast_ref::<Vec<(usize, T::Vertex)>>()
            .expect("snapshot belongs to a different vertex type");
        for (i, v) in saved {
            *self.handles[*i] = v.clone();
        }
    }

    fn vertex_bytes(&self) -> usize {
        // ids, handles, fixed flags
        self.len() * (std::mem::size_of::<u64>() + std::mem::size_of::<usize>() + 1)
    }
}
