//! Defining vertex and factor types: fit `y = exp(m x + c)` to samples with
//! a few gross outliers, with and without a Huber loss.
//!
//!     cargo run --release --example custom_factor

use graphopt::{
    levenberg_marquardt, DifferentiationMode, FactorDescriptor, FactorType, Graph, LmConfig, Loss, Number, Real,
    VertexDescriptor, VertexType,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Curve parameters `(m, c)`.
struct Curve;

impl VertexType<f64> for Curve {
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

/// One sample `(x, y)`; residual `exp(m x + c) − y`.
struct Sample;

impl<G: Real> FactorType<G> for Sample {
    const RESIDUAL_DIM: usize = 1;
    const SLOT_DIMS: &'static [usize] = &[2];
    const HAS_ANALYTIC_JACOBIAN: bool = true;

    type Observation = [G; 2];
    type Data = u8;

    fn residual<D: Number<G>>(&self, params: &[&[D]], obs: &[G; 2], _: &u8, out: &mut [D]) {
        let (m, c) = (params[0][0], params[0][1]);
        out[0] = (m * D::constant(obs[0]) + c).exp() - D::constant(obs[1]);
    }

    fn analytic_jacobian(&self, params: &[&[G]], obs: &[G; 2], _: &u8, _slot: usize, out: &mut [G]) {
        let e = (params[0][0] * obs[0] + params[0][1]).exp();
        out[0] = obs[0] * e;
        out[1] = e;
    }
}

fn fit(samples: &[[f64; 2]], loss: Loss<f64>, mode: DifferentiationMode) -> ([f64; 2], f64) {
    let mut curve = [0.0, 0.0];
    let chi2 = {
        let mut graph = Graph::<f64, f64>::new();
        let mut vertices = VertexDescriptor::<f64, Curve>::new();
        vertices.add_vertex(0, &mut curve).unwrap();
        let set = graph.add_vertex_descriptor(vertices).unwrap();
        let mut factors = FactorDescriptor::new(Sample, &[set], mode).unwrap();
        for s in samples {
            factors.add_factor(&graph, &[0], *s, None, 0u8, loss).unwrap();
        }
        graph.add_factor_descriptor(factors).unwrap();
        let config = LmConfig {
            max_iterations: 100,
            ..Default::default()
        };
        levenberg_marquardt(&mut graph, &config).unwrap().summary.final_chi2
    };
    (curve, chi2)
}

fn main() {
    let (m, c) = (0.3, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut samples: Vec<[f64; 2]> = (0..100)
        .map(|i| {
            let x = i as f64 * 0.05;
            [x, (m * x + c).exp() + rng.random_range(-0.02..0.02)]
        })
        .collect();
    for k in [10, 40, 75] {
        samples[k][1] += 3.0;
    }

    println!("truth          m = {m:.4}, c = {c:.4}");
    for (name, loss) in [("squared", Loss::Default), ("huber(0.1)", Loss::huber(0.1))] {
        for mode in [DifferentiationMode::Analytic, DifferentiationMode::Auto] {
            let ([fm, fc], chi2) = fit(&samples, loss, mode);
            println!("{name:<10} {mode:<9?} m = {fm:.4}, c = {fc:.4}, chi2 = {chi2:.4}");
        }
    }
}
