//! Building blocks for learning contrast-agnostic deformable registration
//! from synthetic data.
//!
//! The crate covers the data side of the method: voxel grids and
//! interpolation ([`grid`]), seeded random streams and hyperparameters
//! ([`sampling`]), stationary-velocity-field deformations ([`deform`]),
//! random label maps ([`shapegen`]), gray-scale image synthesis
//! ([`imagesynth`]), training objectives ([`loss`]) and evaluation metrics
//! ([`metrics`]). The trainable network lives in a separate crate.

pub mod deform;
pub mod error;
pub mod grid;
pub mod imagesynth;
pub mod loss;
pub mod metrics;
pub mod sampling;
pub mod shapegen;

pub use error::{Error, Result};
pub use grid::{GridMeta, LabelMap, ScalarField, VectorField};
pub use sampling::{GenParams, RngStream};
