//! Iterative hard thresholding for noisy low-rank trace regression.
//!
//! The crate covers the measurement model ([`trace_model`]), the spectral
//! IHT estimator with its data-driven threshold schedule and stopping rule
//! ([`iht`]), debiasing and entrywise confidence intervals ([`inference`]), a
//! Pauli-measurement tomography simulator ([`quantum`]), the sparse-regression
//! variant ([`sparse`]) and a seeded experiment driver ([`experiments`]).

// NaN-rejecting checks are written as `!(x >= 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod container;
pub mod error;
pub mod experiments;
pub mod iht;
pub mod inference;
pub mod linalg;
pub mod par;
pub mod quantum;
pub mod rng;
pub mod sparse;
pub mod stats;
pub mod trace_model;

pub use error::{Error, Result};
pub use linalg::{MatrixValue, SchattenOrder, SvdFactors, C64};
pub use par::Execution;
