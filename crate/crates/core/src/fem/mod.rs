//! Finite element infrastructure: reference elements, degree-of-freedom maps,
//! sparse assembly and direct solution.

pub mod assemble;
pub mod dofmap;
pub mod element;
pub mod solve;
pub mod sparse;

pub use assemble::{FemError, Permeability};
pub use dofmap::{DofMap, DofMapSpec, Slot};
pub use solve::{solve_sparse, LuFactor, SolveError};
pub use sparse::{SparseMatrix, Triplets};
