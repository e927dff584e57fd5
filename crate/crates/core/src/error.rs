//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModarError {
    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown sampling pattern `{0}` (expected radial|cartesian|gaussian_density|spiral|full)")]
    UnknownPattern(String),

    #[error("mask infeasible: target fraction {target:.4} not reachable within ±{tol:.2}; achievable fraction {achievable:.4}")]
    MaskInfeasible {
        target: f64,
        achievable: f64,
        tol: f64,
    },

    #[error("noise: {0}")]
    Noise(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fingerprint mismatch: expected {expected}, got {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("unknown domain id `{id}`; known domains: [{known}]")]
    UnknownDomain { id: String, known: String },

    #[error("data: {0}")]
    Data(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl ModarError {
    /// Stable one-word category used by the CLI for machine-parsable errors.
    pub fn category(&self) -> &'static str {
        match self {
            ModarError::Config(_) | ModarError::UnknownPattern(_) => "config",
            ModarError::Shape(_) => "shape",
            ModarError::MaskInfeasible { .. } => "mask",
            ModarError::Noise(_) | ModarError::NonFinite(_) => "numeric",
            ModarError::FingerprintMismatch { .. } => "fingerprint",
            ModarError::UnknownDomain { .. } => "domain",
            ModarError::Data(_) => "data",
            ModarError::Io(_) => "io",
            ModarError::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, ModarError>;
