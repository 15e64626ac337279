//! Anchored variational EM for sequential latent-state models with
//! subject-specific random effects.

pub mod cli;
pub mod data;
pub mod emission;
pub mod error;
pub mod exact_em;
pub mod factor;
pub mod hmm;
pub mod kalman;
pub mod linalg;
pub mod messm;
pub mod mhmm;
pub mod oracle;
pub mod par;
pub mod partial;
pub mod quadrature;
pub mod report;
pub mod simlab;

pub use error::{AvemError, Result};
