//! Floating-point precision selection for the graph and the linear system.
//!
//! A graph is parameterised by two scalar types: the *graph precision* `G`
//! used for vertex parameters, residuals and every arithmetic operation, and
//! the *system precision* `S` used to store Jacobian blocks and the PCG
//! workspace vectors. `S` is never wider than `G`; the type system enforces
//! this because [`Storage<G>`] is only implemented for admissible pairs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

pub use half::bf16;

use crate::differentiation::Number;

/// Precision of vertex parameters, residuals and all arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphPrecision {
    Binary64,
    Binary32,
}

impl GraphPrecision {
    pub fn bits(self) -> u32 {
        match self {
            GraphPrecision::Binary64 => 64,
            GraphPrecision::Binary32 => 32,
        }
    }
}

/// Storage precision of the linear system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemPrecision {
    Binary64,
    Binary32,
    /// Top 16 bits of a binary32; widened before any arithmetic.
    Bfloat16Storage,
}

impl SystemPrecision {
    pub fn bits(self) -> u32 {
        match self {
            SystemPrecision::Binary64 => 64,
            SystemPrecision::Binary32 => 32,
            SystemPrecision::Bfloat16Storage => 16,
        }
    }

    pub fn storage_bytes(self) -> usize {
        self.bits() as usize / 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("system precision {system:?} is wider than graph precision {graph:?}")]
pub struct PrecisionError {
    pub graph: GraphPrecision,
    pub system: SystemPrecision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPair {
    graph: GraphPrecision,
    system: SystemPrecision,
}

impl PrecisionPair {
    pub fn new(graph: GraphPrecision, system: SystemPrecision) -> Result<Self, PrecisionError> {
        if system.bits() > graph.bits() {
            return Err(PrecisionError { graph, system });
        }
        Ok(Self { graph, system })
    }

    pub fn of<G: Real, S: Storage<G>>() -> Self {
        Self {
            graph: G::PRECISION,
            system: S::PRECISION,
        }
    }

    pub fn graph(&self) -> GraphPrecision {
        self.graph
    }

    pub fn system(&self) -> SystemPrecision {
        self.system
    }
}

/// Scalar type usable as graph precision.
pub trait Real:
    Number<Self>
    + PartialOrd
    + FromPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: GraphPrecision;
    const BYTES: usize;

    /// Converts an `f64` literal, rounding to nearest.
    fn lit(x: f64) -> Self;

    fn to_f64_lossless(self) -> f64;

    fn is_finite(self) -> bool;

    /// Machine epsilon.
    fn epsilon() -> Self;

    fn min_positive_value() -> Self;
}

impl Real for f64 {
    const PRECISION: GraphPrecision = GraphPrecision::Binary64;
    const BYTES: usize = 8;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }

    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    #[inline]
    fn epsilon() -> Self {
        f64::EPSILON
    }

    #[inline]
    fn min_positive_value() -> Self {
        f64::MIN_POSITIVE
    }
}

impl Real for f32 {
    const PRECISION: GraphPrecision = GraphPrecision::Binary32;
    const BYTES: usize = 4;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    #[inline]
    fn epsilon() -> Self {
        f32::EPSILON
    }

    #[inline]
    fn min_positive_value() -> Self {
        f32::MIN_POSITIVE
    }
}

/// Storage format for linear-system data at graph precision `G`.
///
/// `store` rounds to nearest, ties to even. `load` is exact.
pub trait Storage<G: Real>: Copy + Default + Debug + Send + Sync + 'static {
    const PRECISION: SystemPrecision;
    const BYTES: usize;

    fn store(x: G) -> Self;
    fn load(self) -> G;
}

impl Storage<f64> for f64 {
    const PRECISION: SystemPrecision = SystemPrecision::Binary64;
    const BYTES: usize = 8;

    #[inline]
    fn store(x: f64) -> Self {
        x
    }

    #[inline]
    fn load(self) -> f64 {
        self
    }
}

impl Storage<f64> for f32 {
    const PRECISION: SystemPrecision = SystemPrecision::Binary32;
    const BYTES: usize = 4;

    #[inline]
    fn store(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn load(self) -> f64 {
        self as f64
    }
}

impl Storage<f32> for f32 {
    const PRECISION: SystemPrecision = SystemPrecision::Binary32;
    const BYTES: usize = 4;

    #[inline]
    fn store(x: f32) -> Self {
        x
    }

    #[inline]
    fn load(self) -> f32 {
        self
    }
}

impl Storage<f32> for bf16 {
    const PRECISION: SystemPrecision = SystemPrecision::Bfloat16Storage;
    const BYTES: usize = 2;

    #[inline]
    fn store(x: f32) -> Self {
        bf16::from_f32(x)
    }

    #[inline]
    fn load(self) -> f32 {
        self.to_f32()
    }
}

impl Storage<f64> for bf16 {
    const PRECISION: SystemPrecision = SystemPrecision::Bfloat16Storage;
    const BYTES: usize = 2;

    #[inline]
    fn store(x: f64) -> Self {
        bf16::from_f32(f64_to_f32_round_to_odd(x))
    }

    #[inline]
    fn load(self) -> f64 {
        self.to_f64()
    }
}

/// Narrows to binary32 with round-to-odd, so that a second rounding to a
/// format with at most 22 fraction bits is correctly rounded.
fn f64_to_f32_round_to_odd(x: f64) -> f32 {
    let nearest = x as f32;
    if !nearest.is_finite() || nearest as f64 == x {
        return nearest;
    }
    let mut bits = nearest.to_bits();
    if (nearest as f64).abs() > x.abs() {
        // step one ulp toward zero
        bits -= 1;
    }
    f32::from_bits(bits | 1)
}
