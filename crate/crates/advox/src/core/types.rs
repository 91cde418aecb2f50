//! Audio and adversarial-threat value types.

use super::projection::NormOrder;
use crate::{AdvoxError, Result};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

/// The toolkit operates at a fixed sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform at [`SAMPLE_RATE`], amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Array1<f32>,
}

impl Waveform {
    /// Validates amplitude range and finiteness.
    pub fn new(samples: Array1<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(AdvoxError::InvalidWaveform("empty waveform".into()));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(AdvoxError::InvalidWaveform(format!(
                    "non-finite sample at index {i}"
                )));
            }
            if !(-1.0..=1.0).contains(&s) {
                return Err(AdvoxError::InvalidWaveform(format!(
                    "sample {s} at index {i} outside [-1, 1]"
                )));
            }
        }
        Ok(Waveform { samples })
    }

    /// Clamps out-of-range samples instead of rejecting them. Non-finite
    /// input is still an error.
    pub fn from_clamped(samples: Array1<f32>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AdvoxError::InvalidWaveform("non-finite sample".into()));
        }
        Self::new(samples.mapv(|s| s.clamp(-1.0, 1.0)))
    }

    pub fn samples(&self) -> &Array1<f32> {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f32 {
        self.len() as f32 / SAMPLE_RATE as f32
    }

    /// Root-mean-square amplitude.
    pub fn rms(&self) -> f32 {
        (self.samples.mapv(|s| s * s).sum() / self.len() as f32).sqrt()
    }
}

/// Integer speaker identity within one dataset's label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakerLabel(pub usize);

impl SpeakerLabel {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How gradients flow through a defended pipeline during an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatMode {
    /// Exact end-to-end gradients through every stage.
    WhiteboxE2ed,
    /// Stages run in the forward pass but backpropagate as identity.
    WhiteboxBpda,
}

/// Loss whose input-gradient an attack consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Softmax cross-entropy against the benign label.
    CrossEntropy,
    /// Margin `max(z_benign - max_other + kappa, 0)`; zero means the
    /// attack succeeded with confidence `kappa`.
    CwMargin { kappa: f32 },
}

/// A request for the gradient of a loss with respect to the waveform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientRequest {
    pub loss: LossKind,
    pub label: SpeakerLabel,
}

/// An additive waveform perturbation together with its norm contract.
#[derive(Debug, Clone)]
pub struct AdversarialPerturbation {
    pub delta: Array1<f32>,
    pub norm_order: NormOrder,
    /// The constraint the attack ran under; `None` for unconstrained
    /// minimum-norm attacks, which report realized norms instead.
    pub budget: Option<f32>,
}

impl AdversarialPerturbation {
    /// Apply to a waveform, clamping back into amplitude range.
    pub fn apply(&self, x: &Waveform) -> Result<Waveform> {
        if self.delta.len() != x.len() {
            return Err(AdvoxError::InvalidWaveform(format!(
                "perturbation length {} does not match waveform length {}",
                self.delta.len(),
                x.len()
            )));
        }
        Waveform::from_clamped(x.samples() + &self.delta)
    }

    pub fn realized_l2(&self) -> f32 {
        super::projection::l2_norm(self.delta.view())
    }

    pub fn realized_linf(&self) -> f32 {
        super::projection::linf_norm(self.delta.view())
    }

    /// Whether the realized norm respects the declared budget.
    pub fn within_budget(&self) -> bool {
        match self.budget {
            None => true,
            Some(eps) => {
                let realized = match self.norm_order {
                    NormOrder::L2 => self.realized_l2(),
                    NormOrder::LInf => self.realized_linf(),
                };
                realized <= eps + 1e-6
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn waveform_rejects_out_of_range() {
        assert!(Waveform::new(array![0.0, 1.5]).is_err());
        assert!(Waveform::new(array![0.0, f32::NAN]).is_err());
        assert!(Waveform::new(array![]).is_err());
        assert!(Waveform::new(array![0.5, -1.0, 1.0]).is_ok());
    }

    #[test]
    fn clamped_constructor_clips() {
        let w = Waveform::from_clamped(array![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(w.samples(), &array![1.0, -1.0, 0.25]);
    }

    #[test]
    fn perturbation_apply_clamps_and_checks_length() {
        let x = Waveform::new(array![0.9, -0.9, 0.0]).unwrap();
        let p = AdversarialPerturbation {
            delta: array![0.2, -0.2, 0.1],
            norm_order: NormOrder::LInf,
            budget: Some(0.2),
        };
        let y = p.apply(&x).unwrap();
        assert_eq!(y.samples(), &array![1.0, -1.0, 0.1]);
        assert!(p.within_budget());

        let short = AdversarialPerturbation {
            delta: array![0.1],
            norm_order: NormOrder::LInf,
            budget: None,
        };
        assert!(short.apply(&x).is_err());
    }
}
