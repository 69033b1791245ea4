use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{snavely_project, BalObservation, BalProblem};

/// Parameters of a generated BAL-format scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticBalConfig {
    pub num_cameras: usize,
    pub num_points: usize,
    /// Cameras observing each point (clamped to `num_cameras`).
    pub views_per_point: usize,
    /// Gaussian noise on observed pixels.
    pub pixel_noise: f64,
    /// Gaussian perturbation of the initial points (world units).
    pub point_noise: f64,
    /// Gaussian perturbation of the initial rotations and translations.
    pub pose_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticBalConfig {
    fn default() -> Self {
        Self {
            num_cameras: 6,
            num_points: 120,
            views_per_point: 3,
            pixel_noise: 0.5,
            point_noise: 0.05,
            pose_noise: 0.01,
            seed: 7,
        }
    }
}

/// A scene of points near the origin seen by cameras about ten units away,
/// in the BAL conventions. Returns the perturbed problem, whose
/// observations come from the unperturbed scene plus pixel noise.
pub fn generate_synthetic_bal(config: &SyntheticBalConfig) -> BalProblem<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gauss = |sigma: f64| Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let unit = gauss(1.0);

    let cameras: Vec<[f64; 9]> = (0..config.num_cameras)
        .map(|_| {
            let w: [f64; 3] = [0, 1, 2].map(|_| 0.15 * unit.sample(&mut rng));
            let f = rng.random_range(400.0..600.0);
            [
                w[0],
                w[1],
                w[2],
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-11.0..-9.0),
                f,
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.005..0.005),
            ]
        })
        .collect();
    let points: Vec<[f64; 3]> = (0..config.num_points)
        .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.5..1.5)))
        .collect();

    let views = config.views_per_point.clamp(1, config.num_cameras.max(1));
    let pixel = gauss(config.pixel_noise);
    let mut observations = Vec::with_capacity(config.num_points * views);
    for (j, pt) in points.iter().enumerate() {
        let mut seen: Vec<usize> = sample(&mut rng, config.num_cameras, views).into_vec();
        seen.sort_unstable();
        for c in seen {
            let pred = snavely_project::<f64, f64>(&cameras[c], pt);
            let noise = if config.pixel_noise > 0.0 {
                [pixel.sample(&mut rng), pixel.sample(&mut rng)]
            } else {
                [0.0, 0.0]
            };
            observations.push(BalObservation {
                camera: c as u32,
                point: j as u32,
                pixel: [pred[0] + noise[0], pred[1] + noise[1]],
            });
        }
    }
    // observation order as in BAL files: by camera, then point
    observations.sort_by_key(|o| (o.camera, o.point));

    let pose = gauss(config.pose_noise);
    let point_noise = gauss(config.point_noise);
    let cameras = cameras
        .into_iter()
        .map(|mut c| {
            if config.pose_noise > 0.0 {
                for v in &mut c[..6] {
                    *v += pose.sample(&mut rng);
                }
            }
            c
        })
        .collect();
    let points = points
        .into_iter()
        .map(|mut p| {
            if config.point_noise > 0.0 {
                for v in &mut p {
                    *v += point_noise.sample(&mut rng);
                }
            }
            p
        })
        .collect();
    BalProblem {
        observations,
        cameras,
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_points_in_front_of_cameras() {
        let p = generate_synthetic_bal(&SyntheticBalConfig::default());
        assert_eq!(p.num_observations(), 360);
        for o in &p.observations {
            let c = &p.cameras[o.camera as usize];
            let x = &p.points[o.point as usize];
            let r = crate::bal::snavely::rotate::<f64, f64>([c[0], c[1], c[2]], *x);
            assert!(r[2] + c[5] < -0.1);
        }
    }

    #[test]
    fn seeded() {
        let cfg = SyntheticBalConfig::default();
        assert_eq!(generate_synthetic_bal(&cfg), generate_synthetic_bal(&cfg));
    }
}
