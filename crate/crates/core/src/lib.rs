//! Batched, graph-based nonlinear least squares.
//!
//! Problems are described as a [`Graph`] of typed vertex and factor
//! descriptors. Vertices are borrowed from the caller and refined in place
//! by [`levenberg_marquardt`], which solves each damped normal-equation
//! system matrix-free with block-Jacobi preconditioned conjugate gradients.
//! Jacobians come from closed-form code, forward-mode dual numbers, or are
//! recomputed on demand, and can be stored at a narrower precision than the
//! graph itself (down to bfloat16).
//!
//! ```
//! use graphopt::circle::{build_circle_graph, generate_circle_problem};
//! use graphopt::{levenberg_marquardt, DifferentiationMode, LmConfig};
//!
//! let mut problem = generate_circle_problem::<f64>(50, 5.0, 0.1, 42);
//! let mut circle =
//!     build_circle_graph::<f64, f64>(&mut problem, DifferentiationMode::Auto, Default::default()).unwrap();
//! let report = levenberg_marquardt(&mut circle.graph, &LmConfig::default()).unwrap();
//! assert!(report.summary.final_chi2 < 0.1 * report.summary.initial_chi2);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bal;
pub mod circle;
pub mod differentiation;
pub mod experiment;
pub mod graph;
pub mod linear;
pub mod lm;
pub mod precision;

pub use differentiation::{DifferentiationMode, Dual, JacobianStore, Number};
pub use graph::{
    ActivePlan, FactorDescriptor, FactorSetId, FactorType, Graph, GraphError, Loss, Snapshot, VertexDescriptor,
    VertexSetId, VertexType,
};
pub use linear::{PcgConfig, PcgStats};
pub use lm::{levenberg_marquardt, DampingPlacement, LmConfig, MemoryAccount, SolveError, SolveReport, TerminationReason};
pub use precision::{bf16, GraphPrecision, PrecisionPair, Real, Storage, SystemPrecision};
