//! Numerical homogenization of incompressible flow through critically
//! perforated domains.
//!
//! The crate computes Stokes capacities of obstacles from the cell problem,
//! turns them into the Brinkman friction matrix of the limit system, and
//! solves steady and time-dependent flows both in perforated boxes and in
//! the homogenized Brinkman model so the two can be compared.

// index loops mirror the formulas; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod capacity;
pub mod error;
pub mod evolution;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod mac;
pub mod par;
pub mod stokes;

pub use error::{Error, Result};
