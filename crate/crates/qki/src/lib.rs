//! Deterministic contrastive representation learning with alternating
//! query/key phases, a binary16 descriptor store, and retrieval evaluation.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: dense layers, Adam, cosine schedule (pure f64, fixed order)
//! - [`half`]: binary16 encode/decode used by the on-disk store
//! - [`store`]: chunked binary16/float32 containers with source tags
//! - [`pca`]: Jacobi-based principal components for the baseline projection
//! - [`synth`]: clustered synthetic data and seeded augmentations
//! - [`encoder`]: baseline featurizer, backbones, residual heads
//! - [`loss`]: Gaussian-overlap contrastive loss with global hard mining
//! - [`eval`]: ranked-pair retrieval metrics
//! - [`trainer`]: phase scheduling, bulk store evaluation, training loops
//! - [`config`] / [`pipeline`]: experiment files and end-to-end commands
//!
//! Every public entry point is deterministic given its explicit seeds: two
//! runs with the same configuration produce bitwise-identical artifacts
//! regardless of worker count.

pub mod config;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod half;
pub mod loss;
pub mod numeric;
pub mod pca;
pub mod pipeline;
pub mod seeds;
pub mod store;
pub mod synth;
pub mod trainer;

pub use error::{QkiError, Result};
