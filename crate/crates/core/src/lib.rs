//! Order-preserving labeling of layered volumes.
//!
//! Voxel labels live on the assignment manifold and evolve under a geometric flow
//! whose potential penalizes label orderings that contradict the known layer
//! sequence along each depth column. Data terms come from region-covariance
//! descriptors compared to per-layer SPD prototypes.

// Negated comparisons below reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clustering;
pub mod error;
pub mod features;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod ordering;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod simplex;
pub mod spd;

pub use error::{Error, Result};
pub use scalar::Real;

pub type MatF64 = linalg::Mat<f64>;
pub type MatF32 = linalg::Mat<f32>;
pub type SpdMatrixF64 = spd::SpdMatrix<f64>;
pub type SpdMatrixF32 = spd::SpdMatrix<f32>;
pub type ProbabilityVectorF64 = simplex::ProbabilityVector<f64>;
pub type ProbabilityVectorF32 = simplex::ProbabilityVector<f32>;
pub type AssignmentMatrixF64 = simplex::AssignmentMatrix<f64>;
pub type AssignmentMatrixF32 = simplex::AssignmentMatrix<f32>;
