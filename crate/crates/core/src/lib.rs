//! Averaged-increment time stepping for the stochastic p-Stokes system on Scott–Vogelius elements.

pub mod diagnostics;
pub mod error;
pub mod fem;
pub mod mesh;
pub mod noise;
pub mod pressure;
pub mod sparse;
pub mod stepper;
pub mod tensor;

pub use error::{Error, Result};
