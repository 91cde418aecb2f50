//! Crate-wide error type.
//!
//! Internal shape or graph inconsistencies panic (they are programming
//! errors); everything a caller can plausibly trigger through data,
//! configuration, or I/O surfaces here as a variant.

use thiserror::Error;

/// Errors surfaced by the toolkit's fallible operations.
#[derive(Debug, Error)]
pub enum AdvoxError {
    /// Audio file I/O or format problems.
    #[error("audio error: {0}")]
    Audio(String),

    /// Waveform content violates the amplitude or length contract.
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    /// Unsupported or malformed norm order.
    #[error("unsupported norm order: {0}")]
    NormOrder(String),

    /// Attack configuration is invalid for the requested algorithm.
    #[error("invalid attack config: {0}")]
    AttackConfig(String),

    /// Training diverged or produced non-finite values.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Defense chain construction or gradient-mode violations.
    #[error("defense chain error: {0}")]
    DefenseChain(String),

    /// Evaluation inputs are degenerate (e.g. single-class calibration).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Dataset manifest problems: duplicates, missing files, bad rows.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Run configuration parsing or validation failures.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint serialization, deserialization, or hash mismatches.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying filesystem problems.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
