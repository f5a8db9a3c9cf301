//! Contrastive and non-contrastive self-supervised learning on a synthetic
//! causal latent model, with linear probes, stability diagnostics and
//! linear identifiability checks.

pub mod error;
pub mod generator;
pub mod identify;
pub mod numerics;
pub mod probe;
pub mod sampling;
pub mod scm;
pub mod ssl;
pub mod stability;

pub use error::{Error, Result};
