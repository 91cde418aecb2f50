//! Shared vocabulary types: waveforms, labels, perturbations, threat
//! modes, seeded randomness, and norm-ball projections.

mod projection;
mod rng;
mod types;

pub use projection::{linf_norm, l2_norm, norm_of, project_lp_ball, NormOrder};
pub use rng::{seeded_rng, RngFactory};
pub use types::{
    AdversarialPerturbation, GradientRequest, LossKind, SpeakerLabel, ThreatMode, Waveform,
    SAMPLE_RATE,
};
