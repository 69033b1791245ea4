//! Levels and fixed vertices on a small 2D pose chain: odometry factors at
//! level 0, loop closures at level 1, the first pose anchored.
//!
//!     cargo run --release --example levels_and_fixed

use graphopt::{
    levenberg_marquardt, DifferentiationMode, FactorDescriptor, FactorType, Graph, LmConfig, Number, Real,
    VertexDescriptor, VertexType,
};

struct Position;

impl VertexType<f64> for Position {
    type Vertex = [f64; 2];
    const DIMENSION: usize = 2;

    fn parameters(v: &[f64; 2], out: &mut [f64]) {
        out.copy_from_slice(v);
    }

    fn update(v: &mut [f64; 2], delta: &[f64]) {
        v[0] += delta[0];
        v[1] += delta[1];
    }
}

/// Measured displacement `b − a`.
struct Displacement;

impl<G: Real> FactorType<G> for Displacement {
    const RESIDUAL_DIM: usize = 2;
    const SLOT_DIMS: &'static [usize] = &[2, 2];

    type Observation = [G; 2];
    type Data = u8;

    fn residual<D: Number<G>>(&self, p: &[&[D]], obs: &[G; 2], _: &u8, out: &mut [D]) {
        out[0] = p[1][0] - p[0][0] - D::constant(obs[0]);
        out[1] = p[1][1] - p[0][1] - D::constant(obs[1]);
    }
}

fn main() {
    // a square walked twice, with odometry drifting to the right
    let n = 16;
    let truth: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let side = (i / 2) % 4;
            let t = (i % 2) as f64 * 0.5;
            match side {
                0 => [t, 0.0],
                1 => [1.0, t],
                2 => [1.0 - t, 1.0],
                _ => [0.0, 1.0 - t],
            }
        })
        .collect();
    let odometry: Vec<[f64; 2]> = (1..n)
        .map(|i| [truth[i][0] - truth[i - 1][0] + 0.03, truth[i][1] - truth[i - 1][1]])
        .collect();
    let mut poses = truth.clone();
    for i in 1..n {
        poses[i] = [poses[i - 1][0] + odometry[i - 1][0], poses[i - 1][1] + odometry[i - 1][1]];
    }
    let error = |poses: &[[f64; 2]]| {
        poses
            .iter()
            .zip(&truth)
            .map(|(p, t)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    };
    println!("dead reckoning: worst position error {:.3}", error(&poses));

    let mut graph = Graph::<f64, f64>::new();
    let mut vertices = VertexDescriptor::<f64, Position>::new();
    for (i, p) in poses.iter_mut().enumerate() {
        vertices.add_vertex(i as u64, p).unwrap();
    }
    let set = graph.add_vertex_descriptor(vertices).unwrap();
    graph.set_fixed(set, 0, true).unwrap();

    let mut factors = FactorDescriptor::new(Displacement, &[set, set], DifferentiationMode::Auto).unwrap();
    for i in 1..n {
        factors
            .add_factor(&graph, &[i as u64 - 1, i as u64], odometry[i - 1], None, 0u8, Default::default())
            .unwrap();
    }
    // loop closures: the second lap revisits the first
    let info = [100.0, 0.0, 0.0, 100.0];
    for i in 8..n {
        let k = factors
            .add_factor(&graph, &[i as u64 - 8, i as u64], [0.0, 0.0], Some(&info), 0u8, Default::default())
            .unwrap();
        factors.set_level(k, 1).unwrap();
    }
    graph.add_factor_descriptor(factors).unwrap();

    for level in [0, 1] {
        let config = LmConfig {
            level,
            max_iterations: 20,
            ..Default::default()
        };
        let r = levenberg_marquardt(&mut graph, &config).unwrap();
        println!(
            "level {level}: {} active factors, chi2 {:.4e} -> {:.4e}",
            r.summary.active_factors, r.summary.initial_chi2, r.summary.final_chi2
        );
    }
    let anchor = graph.vertex_parameters(set, 0).unwrap();
    drop(graph);
    println!("anchor stays at {anchor:?}; worst position error {:.3}", error(&poses));
}
