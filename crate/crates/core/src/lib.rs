//! Robust linear prediction when a block of features is missing at test time.
//!
//! Training data holds observed features `x`, features `z` that will be
//! missing when predicting, and the outcome `y`. From it we learn
//!
//! * the *optimistic* least-squares predictor on `x` alone,
//! * the *conservative* predictor whose errors are empirically uncorrelated
//!   with `z`,
//! * a logistic gate estimating the probability that the unseen `z` is an
//!   outlier, given `x`,
//!
//! and predict with the gate-weighted convex combination of the two weight
//! vectors ([`robust::RobustModel`]).
//!
//! The crate also contains the synthetic processes and Monte Carlo harness
//! used to evaluate the method ([`datagen`], [`evalkit`]), CSV and model-file
//! I/O ([`dataio`]) and the command-line front end ([`cli`]).

// NaN must fail the `!(a <= b)` validation checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod centering;
pub mod cli;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod gate;
pub mod linalg;
pub mod predictors;
pub mod robust;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use robust::{fit_robust, RobustModel};
