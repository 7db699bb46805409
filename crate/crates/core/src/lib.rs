//! Uncertainty-aware generative design workbench for voxel metamaterial
//! units: unit generation, periodic homogenization, a VAE with a Gaussian
//! property head, latent-space uncertainty quantification, and robust
//! NSGA-II design over the latent space.

pub mod error;
pub mod design;
pub mod generators;
pub mod homogenizer;
pub mod metrics;
pub mod training;
pub mod uq;
pub mod model;
pub mod tensor;
pub mod voxel;

pub use error::{Error, Result};
