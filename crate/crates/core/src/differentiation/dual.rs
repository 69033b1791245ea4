use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::precision::Real;

/// Scalar arithmetic that residual functions are written against.
///
/// Implemented by the graph scalars themselves and by [`Dual`], so a single
/// residual definition serves evaluation and forward-mode differentiation.
pub trait Number<G>:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
{
    /// Lifts a constant (zero derivative).
    fn constant(x: G) -> Self;
    fn value(self) -> G;

    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn atan2(self, other: Self) -> Self;
    /// Ties return `self`.
    fn min(self, other: Self) -> Self;
    /// Ties return `self`.
    fn max(self, other: Self) -> Self;
    fn powi(self, n: i32) -> Self;
}

macro_rules! impl_number_for_float {
    ($t:ty) => {
        impl Number<$t> for $t {
            #[inline]
            fn constant(x: $t) -> Self {
                x
            }
            #[inline]
            fn value(self) -> $t {
                self
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            #[inline]
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn atan2(self, other: Self) -> Self {
                <$t>::atan2(self, other)
            }
            #[inline]
            fn min(self, other: Self) -> Self {
                if other < self {
                    other
                } else {
                    self
                }
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                if other > self {
                    other
                } else {
                    self
                }
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
        }
    };
}

impl_number_for_float!(f32);
impl_number_for_float!(f64);

/// Dual number `value + deriv·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<G> {
    pub value: G,
    pub deriv: G,
}

impl<G: Real> Dual<G> {
    pub fn new(value: G, deriv: G) -> Self {
        Self { value, deriv }
    }

    /// A variable seeded with unit derivative.
    pub fn variable(value: G) -> Self {
        Self::new(value, G::one())
    }

    #[inline]
    fn chain(self, value: G, slope: G) -> Self {
        Self::new(value, slope * self.deriv)
    }
}

impl<G: Real> Add for Dual<G> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self::new(self.value + rhs.value, self.deriv + rhs.deriv)
    }
}

impl<G: Real> Sub for Dual<G> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.value - rhs.value, self.deriv - rhs.deriv)
    }
}

impl<G: Real> Mul for Dual<G> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::new(
            self.value * rhs.value,
            self.value * rhs.deriv + self.deriv * rhs.value,
        )
    }
}

impl<G: Real> Div for Dual<G> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = G::one() / rhs.value;
        let value = self.value * inv;
        Self::new(value, (self.deriv - value * rhs.deriv) * inv)
    }
}

impl<G: Real> Neg for Dual<G> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.value, -self.deriv)
    }
}

impl<G: Real> AddAssign for Dual<G> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<G: Real> SubAssign for Dual<G> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<G: Real> MulAssign for Dual<G> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<G: Real> Number<G> for Dual<G> {
    #[inline]
    fn constant(x: G) -> Self {
        Self::new(x, G::zero())
    }

    #[inline]
    fn value(self) -> G {
        self.value
    }

    #[inline]
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, G::one() / (s + s))
    }

    #[inline]
    fn sin(self) -> Self {
        self.chain(self.value.sin(), self.value.cos())
    }

    #[inline]
    fn cos(self) -> Self {
        self.chain(self.value.cos(), -self.value.sin())
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }

    #[inline]
    fn ln(self) -> Self {
        self.chain(self.value.ln(), G::one() / self.value)
    }

    #[inline]
    fn abs(self) -> Self {
        if self.value < G::zero() {
            -self
        } else {
            self
        }
    }

    #[inline]
    fn atan2(self, other: Self) -> Self {
        // d atan2(y, x) = (x dy - y dx) / (x² + y²)
        let (y, x) = (self.value, other.value);
        let denom = x * x + y * y;
        Self::new(y.atan2(x), (x * self.deriv - y * other.deriv) / denom)
    }

    #[inline]
    fn min(self, other: Self) -> Self {
        if other.value < self.value {
            other
        } else {
            self
        }
    }

    #[inline]
    fn max(self, other: Self) -> Self {
        if other.value > self.value {
            other
        } else {
            self
        }
    }

    #[inline]
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(G::one());
        }
        let slope = G::from_i32(n).unwrap() * self.value.powi(n - 1);
        self.chain(self.value.powi(n), slope)
    }
}

/// Evaluates `f` at `x` with the derivative seeded on input `seed_index`.
///
/// Returns the value vector and the column `∂f/∂x[seed_index]`.
pub fn dual_eval<G, F>(f: F, x: &[G], seed_index: usize) -> (Vec<G>, Vec<G>)
where
    G: Real,
    F: FnOnce(&[Dual<G>]) -> Vec<Dual<G>>,
{
    assert!(seed_index < x.len(), "seed index {seed_index} out of range");
    let inputs: Vec<Dual<G>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i == seed_index {
                Dual::variable(v)
            } else {
                Dual::constant(v)
            }
        })
        .collect();
    let out = f(&inputs);
    out.iter().map(|d| (d.value, d.deriv)).unzip()
}
