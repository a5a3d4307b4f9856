//! Item latent factors, pseudo-class labels, and retrieval diagnostics from
//! implicit user-item view logs.
//!
//! The pipeline runs in stages, each with a file-based handoff:
//!
//! 1. [`corpus`]: ingest `item<TAB>user` view logs, filter by activity, split.
//! 2. [`sampler`]: draw popularity-weighted pseudo-negatives from missing cells.
//! 3. [`factorizer`]: regularized matrix factorization by (lock-free parallel) SGD.
//! 4. [`pseudoclass`]: k-means over item factors, emitting class labels.
//! 5. [`eval`]: RMSE, personalized ranking, and common-viewer retrieval metrics.
//!
//! [`synth`] generates planted corpora with known structure for testing, and
//! [`cli`] wires everything into the `latentview` command.

pub mod cli;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod factorizer;
pub mod manifest;
pub mod pseudoclass;
pub mod rng;
pub mod sampler;
pub mod synth;

pub use error::{Error, Result};
