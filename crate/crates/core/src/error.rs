//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by model, sampler, data, and training code.
#[derive(Debug, Error)]
pub enum Error {
    /// Feature vector norm below the normalization threshold (1e-12).
    #[error("degenerate feature vector: norm {norm:.3e} below threshold")]
    DegenerateFeature { norm: f64 },

    /// Projector output collapsed to (near) zero before normalization.
    #[error("degenerate projection: pre-normalization norm {norm:.3e}")]
    DegenerateProjection { norm: f64 },

    /// Latent aggregation cancelled below the 1e-9 threshold.
    #[error("degenerate latent aggregate: sum norm {norm:.3e}")]
    DegenerateAggregate { norm: f64 },

    /// Invalid or inconsistent configuration (shape mismatch, unknown key, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An SGLD chain produced a non-finite gradient or state.
    #[error("SGLD chain diverged at step {step}{}", chain.map(|c| format!(" (chain {c})")).unwrap_or_default())]
    ChainDiverged {
        step: usize,
        chain: Option<usize>,
        /// The offending state, for diagnostics.
        state: Vec<f64>,
    },

    /// A training step produced a non-finite loss or energy.
    #[error("training diverged at iteration {iter}: {reason}")]
    TrainingDiverged { iter: u64, reason: String },

    /// Dataset loading failure, naming the offending file.
    #[error("data error in {path}: {reason}")]
    Data { path: String, reason: String },

    /// A referenced checkpoint or artifact does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Malformed checkpoint container or manifest.
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
