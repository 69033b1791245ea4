//! Random graphs of mixed-dimension vertices and mixed-arity factors, plus a
//! dense assembly of the same normal equations that shares no code with the
//! library's matrix-free path.

#![allow(dead_code)]

use graphopt::{
    DifferentiationMode, FactorDescriptor, FactorSetId, FactorType, Graph, Loss, Number, Real, Storage,
    VertexDescriptor, VertexSetId, VertexType,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Additive vertex of dimension `N`.
pub struct Block<const N: usize>;

impl<G: Real, const N: usize> VertexType<G> for Block<N> {
    type Vertex = [G; N];
    const DIMENSION: usize = N;

    fn parameters(vertex: &[G; N], out: &mut [G]) {
        out.copy_from_slice(vertex);
    }

    fn update(vertex: &mut [G; N], delta: &[G]) {
        for (v, d) in vertex.iter_mut().zip(delta) {
            *v += *d;
        }
    }
}

pub const KINDS: usize = 4;

pub const fn residual_dim(kind: usize) -> usize {
    match kind {
        1 => 3,
        _ => 2,
    }
}

pub const fn slot_dims(kind: usize) -> &'static [usize] {
    match kind {
        0 => &[3],
        1 => &[3, 2],
        2 => &[3, 3],
        _ => &[2, 3, 1],
    }
}

/// `r_a = Σ_k W[a,k] z_k + c_a sin(z_0 + z_last) z_{a mod m} − o_a` over the
/// concatenated slot parameters `z`. `data` holds `W` row-major, then `c`.
pub struct Mix<const K: usize>;

fn mix_residual<G: Real, D: Number<G>>(rd: usize, z: &[D], data: &[G], obs: &[G], out: &mut [D]) {
    let m = z.len();
    let s = (z[0] + z[m - 1]).sin();
    for a in 0..rd {
        let mut acc = D::constant(G::zero());
        for k in 0..m {
            acc += D::constant(data[a * m + k]) * z[k];
        }
        acc += D::constant(data[rd * m + a]) * s * z[a % m];
        out[a] = acc - D::constant(obs[a]);
    }
}

/// `∂r/∂z`, row-major `rd × m`.
pub fn mix_jacobian(rd: usize, z: &[f64], data: &[f64]) -> Vec<f64> {
    let m = z.len();
    let s = z[0] + z[m - 1];
    let mut j = vec![0.0; rd * m];
    for a in 0..rd {
        let c = data[rd * m + a];
        for k in 0..m {
            j[a * m + k] = data[a * m + k];
        }
        j[a * m] += c * s.cos() * z[a % m];
        j[a * m + m - 1] += c * s.cos() * z[a % m];
        j[a * m + a % m] += c * s.sin();
    }
    j
}

pub fn mix_eval(rd: usize, z: &[f64], data: &[f64], obs: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; rd];
    mix_residual::<f64, f64>(rd, z, data, obs, &mut r);
    r
}

impl<G: Real, const K: usize> FactorType<G> for Mix<K> {
    const RESIDUAL_DIM: usize = residual_dim(K);
    const SLOT_DIMS: &'static [usize] = slot_dims(K);
    const HAS_ANALYTIC_JACOBIAN: bool = true;

    type Observation = Vec<G>;
    type Data = Vec<G>;

    fn residual<D: Number<G>>(&self, params: &[&[D]], obs: &Vec<G>, data: &Vec<G>, out: &mut [D]) {
        let z: Vec<D> = params.iter().flat_map(|p| p.iter().copied()).collect();
        mix_residual(residual_dim(K), &z, data, obs, out);
    }

    fn analytic_jacobian(&self, params: &[&[G]], _: &Vec<G>, data: &Vec<G>, slot: usize, out: &mut [G]) {
        let z: Vec<f64> = params.iter().flat_map(|p| p.iter().map(|x| x.to_f64_lossless())).collect();
        let data: Vec<f64> = data.iter().map(|x| x.to_f64_lossless()).collect();
        let rd = residual_dim(K);
        let m = z.len();
        let j = mix_jacobian(rd, &z, &data);
        let dims = slot_dims(K);
        let off: usize = dims[..slot].iter().sum();
        let d = dims[slot];
        for a in 0..rd {
            for c in 0..d {
                out[a * d + c] = G::lit(j[a * m + off + c]);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FactorSpec {
    pub kind: usize,
    /// Per slot, (vertex set 0..3 for dims 1..3, vertex index).
    pub vertices: Vec<(usize, usize)>,
    pub observation: Vec<f64>,
    pub data: Vec<f64>,
    /// Row-major SPD matrix.
    pub information: Vec<f64>,
    pub huber: Option<f64>,
    pub level: u8,
}

#[derive(Clone, Debug)]
pub struct RandomProblem {
    pub v1: Vec<[f64; 1]>,
    pub v2: Vec<[f64; 2]>,
    pub v3: Vec<[f64; 3]>,
    /// (set, index) of fixed vertices.
    pub fixed: Vec<(usize, usize)>,
    pub factors: Vec<FactorSpec>,
}

pub fn random_spd(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let l: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
        }
        a[i * n + i] += 0.1;
    }
    a
}

pub struct RandomOptions {
    pub max_vertices: usize,
    pub max_factors: usize,
    pub fixed_probability: f64,
    pub huber_probability: f64,
    pub leveled_probability: f64,
    /// Chance that a slot reuses a vertex already bound to the same factor.
    pub repeat_probability: f64,
}

impl Default for RandomOptions {
    fn default() -> Self {
        Self {
            max_vertices: 20,
            max_factors: 24,
            fixed_probability: 0.15,
            huber_probability: 0.2,
            leveled_probability: 0.0,
            repeat_probability: 0.0,
        }
    }
}

/// Up to `max_vertices` vertices split over dimensions 1, 2 and 3, with
/// distinct vertices within each factor.
pub fn random_problem(seed: u64, opts: &RandomOptions) -> RandomProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = (opts.max_vertices / 3).max(2);
    let counts = [rng.random_range(1..=per), rng.random_range(2..=per), rng.random_range(2..=per)];
    let mut coord = || rng.random_range(-1.0..1.0);
    let v1 = (0..counts[0]).map(|_| [coord()]).collect();
    let v2 = (0..counts[1]).map(|_| [coord(), coord()]).collect();
    let v3 = (0..counts[2]).map(|_| [coord(), coord(), coord()]).collect();

    let mut fixed = Vec::new();
    for (set, &n) in counts.iter().enumerate() {
        for i in 0..n {
            if rng.random_bool(opts.fixed_probability) {
                fixed.push((set, i));
            }
        }
    }

    let nf = rng.random_range(1..=opts.max_factors);
    let mut factors = Vec::with_capacity(nf);
    for _ in 0..nf {
        let kind = rng.random_range(0..KINDS);
        let dims = slot_dims(kind);
        let rd = residual_dim(kind);
        let mut vertices: Vec<(usize, usize)> = Vec::new();
        for &d in dims {
            let set = d - 1;
            let reusable = vertices.iter().copied().find(|&(s, _)| s == set);
            if let Some(v) = reusable.filter(|_| opts.repeat_probability > 0.0 && rng.random_bool(opts.repeat_probability)) {
                vertices.push(v);
                continue;
            }
            loop {
                let i = rng.random_range(0..counts[set]);
                if !vertices.contains(&(set, i)) {
                    vertices.push((set, i));
                    break;
                }
            }
        }
        let m: usize = dims.iter().sum();
        let data = (0..rd * m + rd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let observation = (0..rd).map(|_| rng.random_range(-0.5..0.5)).collect();
        let information = random_spd(&mut rng, rd);
        let huber = rng.random_bool(opts.huber_probability).then(|| rng.random_range(0.05..1.0));
        let level = u8::from(rng.random_bool(opts.leveled_probability));
        factors.push(FactorSpec {
            kind,
            vertices,
            observation,
            data,
            information,
            huber,
            level,
        });
    }
    RandomProblem {
        v1,
        v2,
        v3,
        fixed,
        factors,
    }
}

pub struct BuiltGraph<'a, G: Real, S: Storage<G>> {
    pub graph: Graph<'a, G, S>,
    pub sets: [VertexSetId; 3],
    /// One descriptor per kind, and each spec's (descriptor, index).
    pub factor_sets: Vec<FactorSetId>,
    pub placement: Vec<(FactorSetId, usize)>,
}

fn add_kind<'a, const K: usize, S: Storage<f64>>(
    graph: &mut Graph<'a, f64, S>,
    sets: &[VertexSetId; 3],
    specs: &[FactorSpec],
    mode: DifferentiationMode,
    placement: &mut [Option<(FactorSetId, usize)>],
) -> FactorSetId {
    let slots: Vec<VertexSetId> = slot_dims(K).iter().map(|&d| sets[d - 1]).collect();
    let mut desc = FactorDescriptor::new(Mix::<K>, &slots, mode).unwrap();
    let mut local = Vec::new();
    for (n, f) in specs.iter().enumerate().filter(|(_, f)| f.kind == K) {
        let ids: Vec<u64> = f.vertices.iter().map(|&(_, i)| i as u64).collect();
        let loss = f.huber.map_or(Loss::Default, Loss::huber);
        let i = desc
            .add_factor(graph, &ids, f.observation.clone(), Some(&f.information), f.data.clone(), loss)
            .unwrap();
        desc.set_level(i, f.level).unwrap();
        local.push((n, i));
    }
    let id = graph.add_factor_descriptor(desc).unwrap();
    for (n, i) in local {
        placement[n] = Some((id, i));
    }
    id
}

/// Builds the graph over borrowed vertices. Factor descriptors are added in
/// kind order.
pub fn build<'a, S: Storage<f64>>(problem: &'a mut RandomProblem, mode: DifferentiationMode) -> BuiltGraph<'a, f64, S> {
    let RandomProblem {
        v1,
        v2,
        v3,
        fixed,
        factors,
    } = problem;
    let mut graph = Graph::<f64, S>::new();
    let mut d1 = VertexDescriptor::<f64, Block<1>>::new();
    for (i, v) in v1.iter_mut().enumerate() {
        d1.add_vertex(i as u64, v).unwrap();
    }
    let mut d2 = VertexDescriptor::<f64, Block<2>>::new();
    for (i, v) in v2.iter_mut().enumerate() {
        d2.add_vertex(i as u64, v).unwrap();
    }
    let mut d3 = VertexDescriptor::<f64, Block<3>>::new();
    for (i, v) in v3.iter_mut().enumerate() {
        d3.add_vertex(i as u64, v).unwrap();
    }
    let sets = [
        graph.add_vertex_descriptor(d1).unwrap(),
        graph.add_vertex_descriptor(d2).unwrap(),
        graph.add_vertex_descriptor(d3).unwrap(),
    ];
    for &(set, i) in fixed.iter() {
        graph.set_fixed(sets[set], i as u64, true).unwrap();
    }
    let mut placement = vec![None; factors.len()];
    let factor_sets = vec![
        add_kind::<0, S>(&mut graph, &sets, factors, mode, &mut placement),
        add_kind::<1, S>(&mut graph, &sets, factors, mode, &mut placement),
        add_kind::<2, S>(&mut graph, &sets, factors, mode, &mut placement),
        add_kind::<3, S>(&mut graph, &sets, factors, mode, &mut placement),
    ];
    BuiltGraph {
        graph,
        sets,
        factor_sets,
        placement: placement.into_iter().map(Option::unwrap).collect(),
    }
}

/// Dense `H = Σ w JᵀΩJ`, `b = Σ w JᵀΩr` and `chi² = Σ ρ(rᵀΩr)` over the
/// active factors, with columns in the plan's order.
pub struct Dense {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub chi2: f64,
}

fn huber_rho_weight(delta: Option<f64>, s: f64) -> (f64, f64) {
    match delta {
        Some(d) if s > d * d => (2.0 * d * s.sqrt() - d * d, d / s.sqrt()),
        _ => (s, 1.0),
    }
}

/// `columns[set][index]` is the first column of a free vertex.
pub fn dense_system(problem: &RandomProblem, columns: &[Vec<Option<usize>>; 3], n: usize, level: u8) -> Dense {
    let mut h = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let mut chi2 = 0.0;
    for f in problem.factors.iter().filter(|f| f.level <= level) {
        let rd = residual_dim(f.kind);
        let z: Vec<f64> = f
            .vertices
            .iter()
            .flat_map(|&(set, i)| match set {
                0 => problem.v1[i].to_vec(),
                1 => problem.v2[i].to_vec(),
                _ => problem.v3[i].to_vec(),
            })
            .collect();
        let m = z.len();
        let r = DVector::from_vec(mix_eval(rd, &z, &f.data, &f.observation));
        let omega = DMatrix::from_row_slice(rd, rd, &f.information);
        let s = (r.transpose() * &omega * &r)[(0, 0)];
        let (rho, w) = huber_rho_weight(f.huber, s);
        chi2 += rho;
        let jl = DMatrix::from_row_slice(rd, m, &mix_jacobian(rd, &z, &f.data));
        let mut j = DMatrix::zeros(rd, n);
        let mut off = 0;
        for &(set, i) in &f.vertices {
            let d = set + 1;
            if let Some(c) = columns[set][i] {
                let mut block = j.view_mut((0, c), (rd, d));
                block += jl.view((0, off), (rd, d));
            }
            off += d;
        }
        h += w * j.transpose() * &omega * &j;
        b += w * j.transpose() * &omega * &r;
    }
    Dense { h, b, chi2 }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Central difference of `f` at `x` with step `h` per coordinate, row-major
/// `out_dim × x.len()`.
pub fn central_difference(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let m = x.len();
    let rd = f(x).len();
    let mut j = vec![0.0; rd * m];
    let mut xp = x.to_vec();
    for k in 0..m {
        let step = h * x[k].abs().max(1.0);
        xp[k] = x[k] + step;
        let fp = f(&xp);
        xp[k] = x[k] - step;
        let fm = f(&xp);
        xp[k] = x[k];
        for a in 0..rd {
            j[a * m + k] = (fp[a] - fm[a]) / (2.0 * step);
        }
    }
    j
}

pub struct OracleComparison {
    pub free_dims: usize,
    pub gradient_error: f64,
    pub diagonal_error: f64,
    /// Worst relative error of `(D H D + λI) v` over the probe vectors.
    pub hvp_error: f64,
    /// `‖A x − b‖ / ‖b‖` of the PCG solution, measured densely.
    pub pcg_residual: f64,
    /// `‖x_pcg − x_dense‖ / ‖x_dense‖`.
    pub pcg_solution_error: f64,
    pub chi2_error: f64,
}

pub fn columns_of(plan: &graphopt::ActivePlan) -> [Vec<Option<usize>>; 3] {
    [plan.column_offsets(0), plan.column_offsets(1), plan.column_offsets(2)]
}

/// Compares the matrix-free system of a random graph against dense assembly.
pub fn compare_with_dense(seed: u64, mode: DifferentiationMode, damping: f64) -> OracleComparison {
    compare_with_dense_using(seed, &RandomOptions::default(), mode, damping)
}

pub fn compare_with_dense_using(seed: u64, opts: &RandomOptions, mode: DifferentiationMode, damping: f64) -> OracleComparison {
    use graphopt::linear::{
        accumulate_gradient_and_diagonal, build_preconditioner, clamp_diagonal, compute_column_scaling,
        hessian_vector_product, pcg_solve,
    };
    let mut problem = random_problem(seed, opts);
    let snapshot = problem.clone();
    let built = build::<f64>(&mut problem, mode);
    let plan = built.graph.activate(0);
    let n = plan.total_free_dims();
    let dense = dense_system(&snapshot, &columns_of(&plan), n, 0);
    let store = graphopt::differentiation::materialize_jacobians(&built.graph, &plan).expect("finite");
    let (b, diag) = accumulate_gradient_and_diagonal(&built.graph, &store, &plan);
    let dense_diag: Vec<f64> = (0..n).map(|i| dense.h[(i, i)]).collect();

    let scaling = compute_column_scaling(&clamp_diagonal(&diag, 1e-6, 1e32));
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(&scaling));
    let a = &d * &dense.h * &d + DMatrix::identity(n, n) * damping;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut hvp_error: f64 = 0.0;
    for _ in 0..3 {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = hessian_vector_product(&built.graph, &store, &plan, &scaling, damping, &v);
        let want = &a * DVector::from_column_slice(&v);
        hvp_error = hvp_error.max(relative_error(&got, want.as_slice()));
    }

    let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let precond = build_preconditioner(&built.graph, &store, &plan, &scaling, damping);
    let config = graphopt::PcgConfig {
        max_iterations: 20 * n.max(1),
        tolerance: 1e-12,
        rejection_ratio: None,
    };
    let (x, _) = pcg_solve::<f64, f64, _, _>(
        |p: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&hessian_vector_product(&built.graph, &store, &plan, &scaling, damping, p));
        },
        &precond,
        &rhs,
        &config,
    );
    let rhs_v = DVector::from_column_slice(&rhs);
    let residual = &a * DVector::from_column_slice(&x) - &rhs_v;
    let pcg_residual = if n == 0 { 0.0 } else { residual.norm() / rhs_v.norm() };
    let x_dense = a.clone().cholesky().map(|c| c.solve(&rhs_v)).unwrap_or_else(|| a.clone().lu().solve(&rhs_v).expect("nonsingular"));
    let pcg_solution_error = if n == 0 { 0.0 } else { relative_error(&x, x_dense.as_slice()) };

    OracleComparison {
        free_dims: n,
        gradient_error: relative_error(&b, dense.b.as_slice()),
        diagonal_error: relative_error(&diag, &dense_diag),
        hvp_error,
        pcg_residual,
        pcg_solution_error,
        chi2_error: (built.graph.total_error(0) - dense.chi2).abs() / dense.chi2.max(f64::MIN_POSITIVE),
    }
}

/// Worst Frobenius-relative disagreement with central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    pub inputs: usize,
    pub worst_analytic: f64,
    pub worst_auto: f64,
}

fn jacobian_pair<F: FactorType<f64>>(
    factor: &F,
    params: &[&[f64]],
    obs: &F::Observation,
    data: &F::Data,
    slot: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = F::RESIDUAL_DIM * F::SLOT_DIMS[slot];
    let mut analytic = vec![0.0; n];
    let mut auto = vec![0.0; n];
    graphopt::differentiation::jacobian_analytic(factor, params, obs, data, slot, &mut analytic);
    graphopt::differentiation::jacobian_auto(factor, params, obs, data, slot, &mut auto);
    (analytic, auto)
}

fn check_slot<F: FactorType<f64>>(
    factor: &F,
    params: &[Vec<f64>],
    obs: &F::Observation,
    data: &F::Data,
    slot: usize,
    acc: &mut GradientCheck,
) {
    let refs: Vec<&[f64]> = params.iter().map(|p| p.as_slice()).collect();
    let (analytic, auto) = jacobian_pair(factor, &refs, obs, data, slot);
    let fd = central_difference(
        |x| {
            let mut local: Vec<&[f64]> = refs.clone();
            local[slot] = x;
            let mut r = vec![0.0; F::RESIDUAL_DIM];
            factor.residual::<f64>(&local, obs, data, &mut r);
            r
        },
        &params[slot],
        1e-6,
    );
    acc.inputs += 1;
    acc.worst_analytic = acc.worst_analytic.max(relative_error(&analytic, &fd));
    acc.worst_auto = acc.worst_auto.max(relative_error(&auto, &fd));
}

pub fn check_circle_gradients(n: usize, seed: u64) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = GradientCheck {
        inputs: 0,
        worst_analytic: 0.0,
        worst_auto: 0.0,
    };
    for _ in 0..n {
        let p = vec![rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let radius: f64 = rng.random_range(0.1..10.0);
        check_slot(&graphopt::circle::CircleFactor, &[p], &radius, &0u8, 0, &mut acc);
    }
    acc
}

/// A camera in BAL conventions with the point in front of it. One input in
/// ten has an exactly zero rotation.
pub fn random_camera_and_point(rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let zero_rotation = rng.random_bool(0.1);
    let mut w = [0.0; 3];
    if !zero_rotation {
        for x in &mut w {
            *x = rng.random_range(-0.6..0.6);
        }
    }
    let camera = vec![
        w[0],
        w[1],
        w[2],
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-10.0..-3.0),
        rng.random_range(100.0..1000.0),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.01..0.01),
    ];
    let point = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    (camera, point)
}

pub fn check_snavely_gradients(n: usize, seed: u64, slot: usize) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = GradientCheck {
        inputs: 0,
        worst_analytic: 0.0,
        worst_auto: 0.0,
    };
    for _ in 0..n {
        let (camera, point) = random_camera_and_point(&mut rng);
        let obs = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
        check_slot(&graphopt::bal::ReprojectionFactor, &[camera, point], &obs, &0u8, slot, &mut acc);
    }
    acc
}
