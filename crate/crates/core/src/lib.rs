//! Simulation of multi-asset price scenarios whose strategy-level tail risk
//! (VaR and Expected Shortfall) matches a reference data set.
//!
//! The pipeline is built around the joint elicitability of the (VaR, ES) pair:
//! a strictly consistent score function turns tail-risk accuracy into a
//! trainable objective. A generator network maps noise to scenario batches, a
//! discriminator network maps sorted strategy PnL samples to (VaR, ES)
//! estimates, and the two are trained as a max-min game. The crate also ships
//! the supervised generator-only baseline, the historical-simulation baseline,
//! a synthetic multi-asset data simulator (AR / GARCH-t / Gaussian drivers),
//! CSV ingestion for real price series, eigenportfolio construction and the
//! full evaluation stack (relative/sampling errors, rank-frequency curves,
//! structural diffs, score-based and coverage hypothesis tests).
//!
//! Everything is deterministic given a seed: all randomness flows from a
//! single `u64` expanded into named ChaCha streams.

pub mod autodiff;
pub mod cli;
pub mod datasim;
pub mod eval;
pub mod networks;
pub mod neuralsort;
pub mod pca;
pub mod scorefn;
pub mod strategies;
pub mod training;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum TailSimError {
    /// Input violates a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),
    /// Matrix/vector dimensions are incompatible.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A binary or CSV artifact could not be decoded.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    /// Checkpoint format version is not supported by this build.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    /// A loss or statistic became non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TailSimError>;

/// Named random streams expanded from the single top-level run seed.
///
/// Keeping stream ids stable means sub-results (data, noise, init, shuffle)
/// are independently reproducible no matter which commands ran before.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const NOISE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const EVAL: u64 = 4;
    /// Per-scenario streams start here: scenario `i` uses `SCENARIO_BASE + i`.
    pub const SCENARIO_BASE: u64 = 1 << 32;
}

/// Deterministic RNG for a `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
