//! Two-scale model of a fluid-saturated porous solid whose inclusions inflate
//! through one-way valves.
//!
//! The crate covers the periodic cell (meshing, corrector problems,
//! homogenized coefficients and their shape sensitivities), the macroscopic
//! time stepping of the limit and the deformation-dependent models, a direct
//! numerical reference on stacked cells, and the reconstruction of
//! microscopic fields. It does no IO and builds without `std`.

#![no_std]

extern crate alloc;

pub mod fem;
pub mod mesh;
pub mod tensor;
pub mod homogenize;
pub mod materials;
pub mod micro_cell;
pub mod sensitivity;
pub mod macro_solver;
pub mod reconstruct;
pub mod dns;
