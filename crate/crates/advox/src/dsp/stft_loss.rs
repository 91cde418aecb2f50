//! Multi-resolution STFT loss for waveform reconstruction training.

use super::stft::StftBasis;
use crate::autograd::{Real, Tensor};
use crate::Result;
use serde::{Deserialize, Serialize};

/// One analysis resolution of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftLossResolution {
    pub n_fft: usize,
    pub win_len: usize,
    pub hop: usize,
}

/// The standard three-resolution bank.
pub const DEFAULT_RESOLUTIONS: [StftLossResolution; 3] = [
    StftLossResolution { n_fft: 512, win_len: 240, hop: 50 },
    StftLossResolution { n_fft: 1024, win_len: 600, hop: 120 },
    StftLossResolution { n_fft: 2048, win_len: 1200, hop: 240 },
];

const MAG_FLOOR: f64 = 1e-14;

/// Smooth, symmetric elementwise-free max of two scalars:
/// `(a + b + |a - b|) / 2`.
fn scalar_max<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    (&(a + b) + &(a - b).abs()).scale(F::from_f64c(0.5))
}

/// Multi-resolution STFT loss between two equal-length waveforms.
///
/// Per resolution: a spectral-convergence term
/// `||X - Y||_F / max(||X||_F, ||Y||_F)` and a mean L1 log-magnitude
/// term, averaged over resolutions. Symmetric in its arguments, zero
/// exactly when the magnitudes agree, and differentiable through both.
pub struct MultiResStftLoss<F: Real> {
    bases: Vec<StftBasis<F>>,
}

impl<F: Real> MultiResStftLoss<F> {
    pub fn new(resolutions: &[StftLossResolution]) -> Self {
        MultiResStftLoss {
            bases: resolutions
                .iter()
                .map(|r| StftBasis::new(r.n_fft, r.win_len, r.hop))
                .collect(),
        }
    }

    pub fn loss(&self, x: &Tensor<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
        assert_eq!(x.numel(), y.numel(), "waveform lengths must match");
        let floor = F::from_f64c(MAG_FLOOR);
        let tiny = Tensor::scalar(F::from_f64c(1e-12));
        let mut total = Tensor::scalar(F::zero());
        for basis in &self.bases {
            let mx = basis.magnitude(x, floor)?;
            let my = basis.magnitude(y, floor)?;
            let diff = &mx - &my;
            let num = (&diff * &diff).sum_all().sqrt();
            let nx = (&mx * &mx).sum_all().sqrt();
            let ny = (&my * &my).sum_all().sqrt();
            let denom = scalar_max(&scalar_max(&nx, &ny), &tiny);
            let sc = &num / &denom;
            let log_l1 = (&mx.ln() - &my.ln()).abs().mean_all();
            total = &total + &(&sc + &log_l1);
        }
        Ok(total.scale(F::one() / F::from_usize(self.bases.len()).unwrap()))
    }
}

impl<F: Real> Default for MultiResStftLoss<F> {
    fn default() -> Self {
        Self::new(&DEFAULT_RESOLUTIONS)
    }
}

/// One-shot convenience over the default resolution bank.
pub fn multi_res_stft_loss<F: Real>(x: &Tensor<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
    MultiResStftLoss::default().loss(x, y)
}
