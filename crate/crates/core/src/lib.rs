//! CPU engine for expression-conditioned dynamic neural radiance fields.
//!
//! A conditioned MLP maps canonical-space positions, view directions,
//! blendshape expression coefficients and per-frame latent codes to color and
//! density. Images are formed by two-pass (coarse, then importance-resampled
//! fine) volumetric integration in front of a fixed background image, and
//! both networks plus the latent codes are fitted with a photometric loss
//! using hand-written reverse accumulation.

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod real;
pub mod render;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
