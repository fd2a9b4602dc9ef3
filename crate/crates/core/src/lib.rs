//! Bayesian inference of static loads with likelihood-informed model reduction.
//!
//! The crate solves linear-Gaussian inverse problems `y = C K⁻¹ f + ε` for the
//! unknown right-hand side `f` of a static linear system, exactly and through
//! three rank-`r` approximations: likelihood-informed Petrov–Galerkin model
//! reduction (LIS-MR), POD Galerkin reduction, and the optimal low-rank (OLR)
//! update. Two structural testbeds and an experiment driver are included.

// `!(x > 0.0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod container;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod forward;
pub mod gaussian;
pub mod linalg;
pub mod mm;
pub mod reduction;
pub mod trace;

pub use error::{Error, Result};
pub use forward::{LinearForwardProblem, ObservationOperator, StaticLinearSystem};
pub use gaussian::{exact_posterior, foerstner_distance, GaussianBelief, LowRankDowndate};
pub use reduction::{
    lis_basis, lis_mr_posterior, olr_posterior, pod_basis, pod_posterior, reduce_petrov_galerkin, MeanLifting,
    PosteriorApproximation, ReducedInverseProblem, ReductionBasis,
};
