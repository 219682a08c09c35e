//! Finite-volume thermodynamics of gauge-invariant quantum spin chains.

pub mod error;
pub mod operator;
pub mod series;
pub mod interaction;
pub mod symmetry;
pub mod states;
pub mod thermo;
pub mod testing;
pub mod runner;

pub use error::{Error, Result};
