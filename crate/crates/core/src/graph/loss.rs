use serde::{Deserialize, Serialize};

use crate::precision::Real;

/// Robust loss applied to the squared Mahalanobis norm `s = rᵀΩr`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss<G> {
    /// `ρ(s) = s`
    #[default]
    Default,
    /// Quadratic up to `delta²`, linear in `√s` beyond.
    Huber { delta: G },
}

impl<G: Real> Loss<G> {
    pub fn huber(delta: G) -> Self {
        assert!(delta > G::zero(), "Huber threshold must be positive");
        Loss::Huber { delta }
    }

    pub fn rho(&self, s: G) -> G {
        match *self {
            Loss::Default => s,
            Loss::Huber { delta } => {
                if s <= delta * delta {
                    s
                } else {
                    let two = G::one() + G::one();
                    two * delta * s.sqrt() - delta * delta
                }
            }
        }
    }

    /// `ρ′(s)`, the IRLS weight applied to the residual and Jacobian.
    pub fn weight(&self, s: G) -> G {
        match *self {
            Loss::Default => G::one(),
            Loss::Huber { delta } => {
                if s <= delta * delta {
                    G::one()
                } else {
                    delta / s.sqrt()
                }
            }
        }
    }
}

/// Squared Mahalanobis norm and IRLS weight of one residual.
///
/// `information` is row-major `r.len() × r.len()`.
pub fn apply_loss_weighting<G: Real>(residual: &[G], information: &[G], loss: &Loss<G>) -> (G, G) {
    let s = mahalanobis(residual, information);
    (s, loss.weight(s))
}

pub(crate) fn mahalanobis<G: Real>(r: &[G], info: &[G]) -> G {
    let n = r.len();
    let mut s = G::zero();
    for i in 0..n {
        let mut row = G::zero();
        for j in 0..n {
            row += info[i * n + j] * r[j];
        }
        s += r[i] * row;
    }
    s
}
