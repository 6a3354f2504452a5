//! Conditional VAE with an integrated Gaussian discriminant classifier.
//!
//! The latent space carries one Gaussian per class (`p(z|y)`), so the
//! classifier is the Bayes posterior of those Gaussians and, with a shared
//! covariance, every pair of classes is separated by a linear discriminant.
//! Counterfactuals are closed-form moves along that discriminant followed by
//! decoding.

pub mod checkpoint;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod seeding;
pub mod train;

pub use error::{Error, Result};
