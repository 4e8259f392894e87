//! Stochastic-approximation GMM for overidentified nonlinear moment models.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64`.

// NaN must fail validity checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critvals;
pub mod dist;
pub mod engine;
pub mod error;
pub mod harness;
pub mod inference;
pub mod jtest;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod refine;
pub mod scalar;
pub mod schedule;
pub mod selftest;

pub use error::{Result, SlimError};
pub use scalar::Scalar;

pub type Dataset64 = model::Dataset<f64>;
pub type IterationState64 = engine::IterationState<f64>;
pub type Hypothesis64 = inference::Hypothesis<f64>;
pub type RandomScalingState64 = inference::RandomScalingState<f64>;
pub type RefinementOperators64 = refine::RefinementOperators<f64>;
pub type OnlineGbarState64 = jtest::OnlineGbarState<f64>;
pub type GmmSolveReport64 = oracle::GmmSolveReport<f64>;
