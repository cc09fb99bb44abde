//! Scott–Vogelius pair on barycentrically refined meshes and its divergence-free subspace.

pub mod divfree;
pub mod element;
pub mod ops;
pub mod space;

pub use divfree::DivFreeBasis;
pub use ops::{Discretization, Field, NormKind, SpaceKind};
pub use space::{Spaces, NONE};
