//! Time grid, averaged Wiener increments and the noise coefficient.

pub mod compensator;
pub mod grid;
pub mod model;
pub mod sampling;

pub use compensator::{compensator_coeffs, CompensatorCoeffs};
pub use grid::TimeGrid;
pub use model::{curl_bubble, Modulation, NoiseModel, NoiseRule};
pub use sampling::{
    coupled_access_range, sample_coupled, sample_exact, sample_rng, ExactSampler, Increments, WienerPath,
};
