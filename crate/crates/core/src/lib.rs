//! Deep neural coregionalization: multivariate spatial regression where the
//! latent factors and the coregionalization loadings are small dropout
//! networks, with Monte Carlo dropout for predictive uncertainty.

pub mod error;
pub mod cli;
pub mod config;
pub mod geosim;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod posterior;
pub mod train;

pub use error::{DncError, Result};
pub use model::{Architecture, DncModel, ModelMasks, Regularization, SpatialDataset};
pub use nn::{DenseNetwork, DropoutMaskSet, GradientSet};
