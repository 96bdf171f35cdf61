//! Overlap-adaptive regularization for two-stage CATE meta-learners.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod krr;
pub mod learners;
pub mod neuralnet;
pub mod nuisance;
pub mod regfun;
pub mod rng;
pub mod second_stage;

pub use error::{OarError, Result};
