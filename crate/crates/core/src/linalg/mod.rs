//! Linear algebra kernels: 7-point stencils, aggregation multigrid and Krylov solvers.

pub mod krylov;
pub mod multigrid;
pub mod stencil;

pub use krylov::{minres, pcg, SolveStats};
pub use multigrid::Multigrid;
pub use stencil::Stencil;
