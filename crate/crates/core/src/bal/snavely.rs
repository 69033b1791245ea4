use crate::differentiation::Number;
use crate::graph::{FactorType, VertexType};
use crate::precision::Real;

/// Nine camera parameters: angle-axis `r₁..r₃`, translation `t₁..t₃`,
/// focal length `f`, radial distortion `k₁`, `k₂`. Additive update.
pub struct CameraVertex;

impl<G: Real> VertexType<G> for CameraVertex {
    type Vertex = [G; 9];
    const DIMENSION: usize = 9;

    fn parameters(vertex: &[G; 9], out: &mut [G]) {
        out.copy_from_slice(vertex);
    }

    fn update(vertex: &mut [G; 9], delta: &[G]) {
        for (v, d) in vertex.iter_mut().zip(delta) {
            *v += *d;
        }
    }
}

/// A 3D point with additive update.
pub struct PointVertex;

impl<G: Real> VertexType<G> for PointVertex {
    type Vertex = [G; 3];
    const DIMENSION: usize = 3;

    fn parameters(vertex: &[G; 3], out: &mut [G]) {
        out.copy_from_slice(vertex);
    }

    fn update(vertex: &mut [G; 3], delta: &[G]) {
        for (v, d) in vertex.iter_mut().zip(delta) {
            *v += *d;
        }
    }
}

#[inline]
fn cross<D: Copy + std::ops::Mul<Output = D> + std::ops::Sub<Output = D>>(a: [D; 3], b: [D; 3]) -> [D; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// `R(ω) X` by Rodrigues' formula, with the first-order form near `θ = 0`.
pub(crate) fn rotate<G: Real, D: Number<G>>(w: [D; 3], x: [D; 3]) -> [D; 3] {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let wx = cross(w, x);
    if theta2.value() > G::epsilon() {
        let theta = theta2.sqrt();
        let (s, c) = (theta.sin(), theta.cos());
        let b = s / theta;
        let k = (D::constant(G::one()) - c) / theta2;
        let wdx = w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
        [0, 1, 2].map(|i| c * x[i] + b * wx[i] + k * wdx * w[i])
    } else {
        [0, 1, 2].map(|i| x[i] + wx[i])
    }
}

/// Predicted pixel of `point` in `camera`:
/// `P = R X + t`, `p = −(P_x, P_y)/P_z`, `f (1 + k₁‖p‖² + k₂‖p‖⁴) p`.
pub fn snavely_project<G: Real, D: Number<G>>(camera: &[D], point: &[D]) -> [D; 2] {
    let r = rotate::<G, D>([camera[0], camera[1], camera[2]], [point[0], point[1], point[2]]);
    let p = [r[0] + camera[3], r[1] + camera[4], r[2] + camera[5]];
    let px = -p[0] / p[2];
    let py = -p[1] / p[2];
    let n = px * px + py * py;
    let d = D::constant(G::one()) + camera[7] * n + camera[8] * n * n;
    let s = camera[6] * d;
    [s * px, s * py]
}

/// Reprojection residual `predicted − observed`; slot 0 camera, slot 1 point.
pub struct ReprojectionFactor;

impl<G: Real> FactorType<G> for ReprojectionFactor {
    const RESIDUAL_DIM: usize = 2;
    const SLOT_DIMS: &'static [usize] = &[9, 3];
    const HAS_ANALYTIC_JACOBIAN: bool = true;

    type Observation = [G; 2];
    type Data = u8;

    fn residual<D: Number<G>>(&self, params: &[&[D]], obs: &[G; 2], _: &u8, out: &mut [D]) {
        let pred = snavely_project::<G, D>(params[0], params[1]);
        out[0] = pred[0] - D::constant(obs[0]);
        out[1] = pred[1] - D::constant(obs[1]);
    }

    fn analytic_jacobian(&self, params: &[&[G]], _: &[G; 2], _: &u8, slot: usize, out: &mut [G]) {
        let (cam, point) = (params[0], params[1]);
        match slot {
            0 => snavely_camera_jacobian(cam, point, out),
            _ => snavely_point_jacobian(cam, point, out),
        }
    }
}

struct Chain<G> {
    /// ∂P/∂ω and ∂P/∂X, row-major 3×3.
    dp_dw: [G; 9],
    dp_dx: [G; 9],
    /// ∂pred/∂P, row-major 2×3.
    dpred_dp: [G; 6],
    /// ∂pred/∂(f, k₁, k₂), row-major 2×3.
    dpred_intr: [G; 6],
}

fn chain<G: Real>(cam: &[G], point: &[G]) -> Chain<G> {
    let w = [cam[0], cam[1], cam[2]];
    let x = [point[0], point[1], point[2]];
    let (f, k1, k2) = (cam[6], cam[7], cam[8]);
    let one = G::one();
    let zero = G::zero();
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let wx = cross(w, x);

    // −[X]×, the derivative of ω × X with respect to ω
    let d_cross_dw = [zero, x[2], -x[1], -x[2], zero, x[0], x[1], -x[0], zero];
    let mut dp_dw = [zero; 9];
    let mut dp_dx = [zero; 9];
    let rx;
    if theta2 > G::epsilon() {
        let theta = theta2.sqrt();
        let (s, c) = (theta.sin(), theta.cos());
        let a = c;
        let b = s / theta;
        let k = (one - c) / theta2;
        let da = -s;
        let db = (theta * c - s) / theta2;
        let dk = (theta * s - (one + one) * (one - c)) / (theta2 * theta);
        let wdx = w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
        rx = [0, 1, 2].map(|i| a * x[i] + b * wx[i] + k * wdx * w[i]);
        for i in 0..3 {
            for j in 0..3 {
                let u = w[j] / theta;
                let mut v = x[i] * da * u + wx[i] * db * u + b * d_cross_dw[i * 3 + j] + dk * u * wdx * w[i] + k * x[j] * w[i];
                if i == j {
                    v += k * wdx;
                }
                dp_dw[i * 3 + j] = v;
            }
        }
        let skew = [zero, -w[2], w[1], w[2], zero, -w[0], -w[1], w[0], zero];
        for i in 0..3 {
            for j in 0..3 {
                let mut v = b * skew[i * 3 + j] + k * w[i] * w[j];
                if i == j {
                    v += a;
                }
                dp_dx[i * 3 + j] = v;
            }
        }
    } else {
        rx = [0, 1, 2].map(|i| x[i] + wx[i]);
        dp_dw = d_cross_dw;
        dp_dx = [one, -w[2], w[1], w[2], one, -w[0], -w[1], w[0], one];
    }
    let p = [rx[0] + cam[3], rx[1] + cam[4], rx[2] + cam[5]];
    let iz = one / p[2];
    let px = -p[0] * iz;
    let py = -p[1] * iz;
    let n = px * px + py * py;
    let d = one + k1 * n + k2 * n * n;
    // ∂p/∂P
    let dproj = [-iz, zero, p[0] * iz * iz, zero, -iz, p[1] * iz * iz];
    // ∂pred/∂p = f (d I + p (2 (k₁ + 2 k₂ n) p)ᵀ)
    let g = (one + one) * (k1 + (one + one) * k2 * n);
    let pp = [px, py];
    let mut dpred_dpp = [zero; 4];
    for r in 0..2 {
        for c in 0..2 {
            let mut v = pp[r] * g * pp[c];
            if r == c {
                v += d;
            }
            dpred_dpp[r * 2 + c] = f * v;
        }
    }
    let mut dpred_dp = [zero; 6];
    for r in 0..2 {
        for c in 0..3 {
            dpred_dp[r * 3 + c] = dpred_dpp[r * 2] * dproj[c] + dpred_dpp[r * 2 + 1] * dproj[3 + c];
        }
    }
    let dpred_intr = [d * px, f * n * px, f * n * n * px, d * py, f * n * py, f * n * n * py];
    Chain {
        dp_dw,
        dp_dx,
        dpred_dp,
        dpred_intr,
    }
}

/// `∂ residual / ∂ camera`, row-major 2×9.
pub fn snavely_camera_jacobian<G: Real>(camera: &[G], point: &[G], out: &mut [G]) {
    let ch = chain(camera, point);
    for r in 0..2 {
        let row = &mut out[r * 9..(r + 1) * 9];
        for j in 0..3 {
            let mut acc = G::zero();
            for k in 0..3 {
                acc += ch.dpred_dp[r * 3 + k] * ch.dp_dw[k * 3 + j];
            }
            row[j] = acc;
            row[3 + j] = ch.dpred_dp[r * 3 + j];
            row[6 + j] = ch.dpred_intr[r * 3 + j];
        }
    }
}

/// `∂ residual / ∂ point`, row-major 2×3.
pub fn snavely_point_jacobian<G: Real>(camera: &[G], point: &[G], out: &mut [G]) {
    let ch = chain(camera, point);
    for r in 0..2 {
        for j in 0..3 {
            let mut acc = G::zero();
            for k in 0..3 {
                acc += ch.dpred_dp[r * 3 + k] * ch.dp_dx[k * 3 + j];
            }
            out[r * 3 + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::differentiation::jacobian_auto;

    fn cam(f: f64, k1: f64) -> [f64; 9] {
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, f, k1, 0.0]
    }

    #[test]
    fn projection_examples() {
        assert_eq!(snavely_project::<f64, f64>(&cam(100.0, 0.0), &[0.0, 0.0, -1.0]), [0.0, 0.0]);
        assert_eq!(snavely_project::<f64, f64>(&cam(100.0, 0.0), &[1.0, 0.0, -1.0]), [100.0, 0.0]);
        let p = snavely_project::<f64, f64>(&cam(100.0, 0.1), &[1.0, 0.0, -1.0]);
        assert!((p[0] - 110.0).abs() < 1e-12 && p[1] == 0.0);
    }

    #[test]
    fn zero_depth_is_not_finite() {
        let p = snavely_project::<f64, f64>(&cam(100.0, 0.0), &[1.0, 0.0, 0.0]);
        assert!(!p[0].is_finite());
    }

    #[test]
    fn rotation_by_quarter_turn() {
        let q = std::f64::consts::FRAC_PI_2;
        let r = rotate::<f64, f64>([0.0, 0.0, q], [1.0, 0.0, 0.0]);
        assert!(r[0].abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15 && r[2].abs() < 1e-15);
    }

    #[test]
    fn analytic_matches_auto() {
        let camera = [0.1, -0.2, 0.3, 0.05, -0.1, -4.0, 520.0, -0.03, 0.002];
        let point = [0.4, -0.3, 0.2];
        let params: [&[f64]; 2] = [&camera, &point];
        let mut auto = [0.0; 18];
        let mut analytic = [0.0; 18];
        jacobian_auto(&ReprojectionFactor, &params, &[0.0, 0.0], &0u8, 0, &mut auto);
        snavely_camera_jacobian(&camera, &point, &mut analytic);
        for (a, b) in auto.iter().zip(&analytic) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
        let mut auto = [0.0; 6];
        let mut analytic = [0.0; 6];
        jacobian_auto(&ReprojectionFactor, &params, &[0.0, 0.0], &0u8, 1, &mut auto);
        snavely_point_jacobian(&camera, &point, &mut analytic);
        for (a, b) in auto.iter().zip(&analytic) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn small_angle_branch_matches_auto() {
        let camera = [0.0, 0.0, 0.0, 0.1, 0.2, -5.0, 400.0, 0.01, 0.0];
        let point = [0.3, 0.1, -0.2];
        let params: [&[f64]; 2] = [&camera, &point];
        let mut auto = [0.0; 18];
        let mut analytic = [0.0; 18];
        jacobian_auto(&ReprojectionFactor, &params, &[0.0, 0.0], &0u8, 0, &mut auto);
        snavely_camera_jacobian(&camera, &point, &mut analytic);
        for (a, b) in auto.iter().zip(&analytic) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}
