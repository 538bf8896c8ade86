//! Input-space Fisher information scores for small classifiers.
//!
//! The central quantity is `λmax`, the largest eigenvalue of
//! `G(x) = E_{y~p(y|x)}[∇ₓ log p(y|x) ∇ₓ log p(y|x)ᵀ]`, computed from the
//! `C × d` Jacobian of the log-probabilities through its `C × C` Gram matrix.

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod cli;
pub mod data;
pub mod eigen;
pub mod error;
pub mod fim;
pub mod models;
pub mod probe;
pub mod service;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fim::{fim_spectrum, jacobian, lambda_max, score_dataset, FimResult, ScoredRow};
pub use models::{build_model, model_hash, Classifier, EmbeddingTable, Model, ModelSpec};
pub use tensor::Tensor;

/// Environment variable that caps the worker pool size.
pub const THREADS_ENV: &str = "FISHER_PROBE_THREADS";

/// Configures the global rayon pool from [`THREADS_ENV`] if it is set.
/// Later calls, or calls after the pool is in use, are no-ops.
pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
