//! Chiral boundary value problems for twisted Dirac operators.
//!
//! The crate is organised bottom-up: Clifford modules, Taylor jets of boundary
//! data, a symbolic calculus for polyhomogeneous matrix symbols, a spectral
//! solver on cylinders, boundary determination, and chiral Green's kernels.

pub mod clifford;
pub mod cylinder_solver;
pub mod error;
pub mod geometry;
pub mod greens;
pub mod jet;
pub mod linalg;
pub mod recovery;
pub mod symbol_engine;
pub mod verify;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dense complex matrix.
pub type CMat = nalgebra::DMatrix<C64>;
/// Dense real matrix.
pub type RMat = nalgebra::DMatrix<f64>;
