//! Adversarial robustness toolkit for speaker recognition at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autograd`]) that powers everything gradient-shaped: the log-mel
//! front end ([`dsp`]), the x-vector style classifier ([`model`]), the
//! attack suite ([`attacks`]), and the pre-processing defenses together
//! with their adaptive-attack gradient wiring ([`defenses`]). Evaluation
//! ([`eval`]), synthetic data ([`data`]), and the run driver ([`config`],
//! [`driver`]) sit on top.
//!
//! All randomness flows through seeded, labeled streams ([`core::rng`])
//! so that every pipeline stage is reproducible bit for bit.

#![forbid(unsafe_code)]

pub mod attacks;
pub mod autograd;
pub mod config;
pub mod core;
pub mod data;
pub mod defenses;
pub mod driver;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;

pub use error::AdvoxError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, AdvoxError>;
