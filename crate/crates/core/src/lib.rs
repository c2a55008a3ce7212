#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod effective_dim;
pub mod enkf;
pub mod error;
pub mod kalman_ref;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
