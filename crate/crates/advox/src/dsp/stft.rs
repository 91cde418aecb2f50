//! Windowed DFT power spectra as convolution graphs.

use crate::autograd::{conv1d, ConvSpec, Real, Storage, Tensor};
use crate::{AdvoxError, Result};
use ndarray::Array3;

/// Fixed analysis basis: a Hann-windowed DFT of `n_fft` bins evaluated
/// over frames of `win_len` samples advanced by `hop`.
///
/// The basis is a `[2 * bins, 1, win_len]` convolution kernel holding
/// the cosine and sine projections; frames follow the no-padding
/// convention `floor((len - win_len) / hop) + 1`.
pub struct StftBasis<F: Real> {
    pub n_fft: usize,
    pub win_len: usize,
    pub hop: usize,
    kernel: Storage<F>,
}

impl<F: Real> StftBasis<F> {
    pub fn new(n_fft: usize, win_len: usize, hop: usize) -> Self {
        assert!(win_len <= n_fft, "window longer than FFT size");
        assert!(hop > 0 && win_len > 0);
        let bins = n_fft / 2 + 1;
        let mut kernel = Array3::<F>::zeros((2 * bins, 1, win_len));
        let two_pi = F::from_f64c(2.0) * F::PI();
        let n_fft_f = F::from_usize(n_fft).unwrap();
        for n in 0..win_len {
            // Periodic Hann window.
            let phase = two_pi * F::from_usize(n).unwrap() / F::from_usize(win_len).unwrap();
            let w = F::from_f64c(0.5) * (F::one() - phase.cos());
            for k in 0..bins {
                let ang = two_pi * F::from_usize(k).unwrap() * F::from_usize(n).unwrap() / n_fft_f;
                kernel[[k, 0, n]] = w * ang.cos();
                kernel[[bins + k, 0, n]] = -w * ang.sin();
            }
        }
        StftBasis {
            n_fft,
            win_len,
            hop,
            kernel: kernel.into_dyn().into_shared(),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames an input of `len` samples produces.
    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.win_len {
            return Err(AdvoxError::InvalidWaveform(format!(
                "waveform of {len} samples shorter than one {}-sample window",
                self.win_len
            )));
        }
        Ok((len - self.win_len) / self.hop + 1)
    }

    /// Power spectrogram `[bins, frames]` of a `[len]` waveform tensor.
    pub fn power(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let len = x.numel();
        let frames = self.frames(len)?;
        let bins = self.bins();
        let x3 = x.reshape(&[1, 1, len]);
        let k = Tensor::constant(self.kernel.clone());
        let proj = conv1d(&x3, &k, ConvSpec::plain(self.hop, 0)); // [1, 2*bins, frames]
        let re = proj.slice_view(&[(0, 1), (0, bins), (0, frames)]);
        let im = proj.slice_view(&[(0, 1), (bins, bins), (0, frames)]);
        let power = &(&re * &re) + &(&im * &im);
        Ok(power.reshape(&[bins, frames]))
    }

    /// Magnitude spectrogram with a numerical floor inside the root.
    pub fn magnitude(&self, x: &Tensor<F>, floor: F) -> Result<Tensor<F>> {
        Ok(self.power(x)?.max_scalar(floor).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use ndarray::{Array1, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_follows_floor_formula() {
        let b = StftBasis::<f32>::new(512, 400, 160);
        assert_eq!(b.frames(48000).unwrap(), 298);
        assert_eq!(b.frames(400).unwrap(), 1);
        assert_eq!(b.frames(559).unwrap(), 1);
        assert_eq!(b.frames(560).unwrap(), 2);
        assert!(b.frames(399).is_err());
    }

    #[test]
    fn power_matches_naive_dft_oracle() {
        // One frame, full resolution: compare against a direct DFT sum.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_fft = 64;
        let win = 48;
        let x: Vec<f64> = (0..win).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let basis = StftBasis::<f64>::new(n_fft, win, win);
        let xt = Tensor::from_array(ArrayD::from_shape_vec(IxDyn(&[win]), x.clone()).unwrap());
        let power = basis.power(&xt).unwrap().to_array();
        for k in 0..=n_fft / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &v) in x.iter().enumerate() {
                let w = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos());
                let ang = 2.0 * std::f64::consts::PI * k as f64 * n as f64 / n_fft as f64;
                re += v * w * ang.cos();
                im -= v * w * ang.sin();
            }
            let expect = re * re + im * im;
            let got = power[[k, 0]];
            assert!(
                (got - expect).abs() < 1e-10 * expect.abs().max(1.0),
                "bin {k}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn on_bin_tone_concentrates_power() {
        // 1 kHz is exactly bin 32 of a 512-point FFT at 16 kHz.
        let sr = 16000.0f32;
        let x = Array1::from_shape_fn(4000, |i| {
            0.5 * (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / sr).sin()
        });
        let basis = StftBasis::<f32>::new(512, 400, 160);
        let p = basis
            .power(&Tensor::from_array(x.into_dyn()))
            .unwrap()
            .to_array();
        let frames = p.shape()[1];
        for t in 0..frames {
            let mut best = 0;
            for k in 0..basis.bins() {
                if p[[k, t]] > p[[best, t]] {
                    best = k;
                }
            }
            assert_eq!(best, 32, "frame {t} peak at bin {best}");
        }
    }
}
