//! Deep uncertainty models over fixed embeddings.
//!
//! A small MLP predicts a per-dimension variance for every embedding while
//! the embedding itself is kept as the mean. The head is trained by fusing
//! groups of embeddings with a product of experts and contrasting the fused
//! means. The norm of the predicted covariance then serves as an
//! unsupervised oddity score.

pub mod baselines;
pub mod data;
pub mod dum;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod numkernel;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
