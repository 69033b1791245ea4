//! Noisy 2D points constrained to a circle: the smallest end-to-end problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::differentiation::{DifferentiationMode, Number};
use crate::graph::{
    FactorDescriptor, FactorSetId, FactorType, Graph, GraphError, Loss, VertexDescriptor, VertexSetId,
    VertexType,
};
use crate::precision::{Real, Storage};

/// A 2D point with additive update.
pub struct Point2;

impl<G: Real> VertexType<G> for Point2 {
    type Vertex = [G; 2];
    const DIMENSION: usize = 2;

    fn parameters(vertex: &[G; 2], out: &mut [G]) {
        out.copy_from_slice(vertex);
    }

    fn update(vertex: &mut [G; 2], delta: &[G]) {
        vertex[0] += delta[0];
        vertex[1] += delta[1];
    }
}

/// `x² + y² − r²` for a point and an observed radius `r`.
pub struct CircleFactor;

impl<G: Real> FactorType<G> for CircleFactor {
    const RESIDUAL_DIM: usize = 1;
    const SLOT_DIMS: &'static [usize] = &[2];
    const HAS_ANALYTIC_JACOBIAN: bool = true;

    type Observation = G;
    type Data = u8;

    fn residual<D: Number<G>>(&self, params: &[&[D]], radius: &G, _: &u8, out: &mut [D]) {
        let (x, y) = (params[0][0], params[0][1]);
        let r = D::constant(*radius);
        out[0] = x * x + y * y - r * r;
    }

    fn analytic_jacobian(&self, params: &[&[G]], _: &G, _: &u8, _slot: usize, out: &mut [G]) {
        let p = params[0];
        out[0] = p[0] + p[0];
        out[1] = p[1] + p[1];
    }
}

/// Generated instance; the graph borrows `points` and refines them in place.
#[derive(Clone, Debug, PartialEq)]
pub struct CircleProblem<G> {
    pub points: Vec<[G; 2]>,
    pub radius: G,
}

/// `n` points on a circle of `radius` perturbed by isotropic Gaussian noise.
pub fn generate_circle_problem<G: Real>(n: usize, radius: f64, noise_sigma: f64, seed: u64) -> CircleProblem<G> {
    assert!(n >= 1, "need at least one point");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let points = (0..n)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = if noise_sigma > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            [
                G::lit(radius * angle.cos() + dx),
                G::lit(radius * angle.sin() + dy),
            ]
        })
        .collect();
    CircleProblem {
        points,
        radius: G::lit(radius),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CircleOptions {
    /// Fix the last point.
    pub fix_last: bool,
    /// Move the third factor to level 1 so it is inactive at level 0.
    pub level_demo: bool,
    pub huber_delta: Option<f64>,
}

pub struct CircleGraph<'a, G: Real, S: Storage<G>> {
    pub graph: Graph<'a, G, S>,
    pub points: VertexSetId,
    pub factors: FactorSetId,
}

/// One circle factor per point.
pub fn build_circle_graph<'a, G: Real, S: Storage<G>>(
    problem: &'a mut CircleProblem<G>,
    mode: DifferentiationMode,
    options: CircleOptions,
) -> Result<CircleGraph<'a, G, S>, GraphError> {
    let n = problem.points.len();
    let radius = problem.radius;
    let mut graph = Graph::<G, S>::new();
    let mut desc = VertexDescriptor::<G, Point2>::with_capacity(n);
    for (i, p) in problem.points.iter_mut().enumerate() {
        desc.add_vertex(i as u64, p)?;
    }
    let points = graph.add_vertex_descriptor(desc)?;
    let loss = match options.huber_delta {
        Some(d) => Loss::huber(G::lit(d)),
        None => Loss::Default,
    };
    let mut factor_desc = FactorDescriptor::new(CircleFactor, &[points], mode)?;
    factor_desc.reserve(n);
    for i in 0..n {
        factor_desc.add_factor(&graph, &[i as u64], radius, None, 0u8, loss)?;
    }
    let factors = graph.add_factor_descriptor(factor_desc)?;
    if options.fix_last {
        graph.set_fixed(points, (n - 1) as u64, true)?;
    }
    if options.level_demo && n > 2 {
        graph.set_level(factors, 2, 1)?;
    }
    Ok(CircleGraph { graph, points, factors })
}
