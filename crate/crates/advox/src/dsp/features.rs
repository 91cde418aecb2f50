//! Differentiable 80-band log-mel features with utterance-level mean
//! normalization.

use super::stft::StftBasis;
use crate::autograd::{Real, Storage, Tensor};
use crate::Result;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Front-end geometry. Defaults: 25 ms Hann window, 10 ms hop, 512-point
/// FFT, 80 mel bands over the full 0..8 kHz range, power floored at
/// 1e-10 before the natural log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub n_fft: usize,
    pub win_len: usize,
    pub hop: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            n_mels: 80,
            n_fft: 512,
            win_len: 400,
            hop: 160,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            floor: 1e-10,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters for a config.
pub fn mel_center_frequencies(cfg: &LogMelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    (1..=cfg.n_mels)
        .map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Graph-level log-mel extractor.
pub struct LogMelExtractor<F: Real> {
    pub cfg: LogMelConfig,
    basis: StftBasis<F>,
    mel: Storage<F>,
}

impl<F: Real> LogMelExtractor<F> {
    pub fn new(cfg: LogMelConfig) -> Self {
        let basis = StftBasis::new(cfg.n_fft, cfg.win_len, cfg.hop);
        let bins = cfg.n_fft / 2 + 1;
        let sr = crate::core::SAMPLE_RATE as f64;
        let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sr / cfg.n_fft as f64).collect();

        // Peak-one triangles with mel-spaced corners.
        let lo = hz_to_mel(cfg.fmin_hz);
        let hi = hz_to_mel(cfg.fmax_hz);
        let corners: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|m| mel_to_hz(lo + (hi - lo) * m as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut mel = Array2::<F>::zeros((cfg.n_mels, bins));
        for m in 0..cfg.n_mels {
            let (l, c, r) = (corners[m], corners[m + 1], corners[m + 2]);
            for (k, &f) in bin_hz.iter().enumerate() {
                let w = if f >= l && f <= c && c > l {
                    (f - l) / (c - l)
                } else if f > c && f <= r && r > c {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    mel[[m, k]] = F::from_f64c(w);
                }
            }
        }
        LogMelExtractor {
            cfg,
            basis,
            mel: mel.into_dyn().into_shared(),
        }
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        self.basis.frames(len)
    }

    /// Log-mel spectrogram `[n_mels, frames]` without mean normalization.
    pub fn log_mel_unnormalized(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let power = self.basis.power(x)?; // [bins, frames]
        let mel = Tensor::constant(self.mel.clone()).matmul(&power); // [n_mels, frames]
        Ok(mel.max_scalar(F::from_f64c(self.cfg.floor)).ln())
    }

    /// Model input: log-mel with the per-band utterance mean removed.
    pub fn extract(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let lm = self.log_mel_unnormalized(x)?;
        Ok(&lm - &lm.mean_axes(&[1], true))
    }

    /// Convenience for plain arrays; returns the feature values.
    pub fn extract_value(&self, samples: &ndarray::Array1<F>) -> Result<ndarray::Array2<F>> {
        let x = Tensor::from_array(samples.clone().into_dyn());
        let out = self.extract(&x)?;
        Ok(out
            .to_array()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d features"))
    }

    /// Unnormalized log-mel values for plain arrays.
    pub fn log_mel_value(&self, samples: &ndarray::Array1<F>) -> Result<ndarray::Array2<F>> {
        let x = Tensor::from_array(samples.clone().into_dyn());
        let out = self.log_mel_unnormalized(&x)?;
        Ok(out
            .to_array()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d features"))
    }
}

impl<F: Real> Default for LogMelExtractor<F> {
    fn default() -> Self {
        Self::new(LogMelConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use crate::autograd::{grad, Tensor};
    use ndarray::{Array1, ArrayD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tone_lands_in_nearest_mel_band() {
        let cfg = LogMelConfig::default();
        let centers = mel_center_frequencies(&cfg);
        let target = 1000.0;
        let expect = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - target).abs().partial_cmp(&(b.1 - target).abs()).unwrap()
            })
            .unwrap()
            .0;

        let sr = crate::core::SAMPLE_RATE as f32;
        let x = Array1::from_shape_fn(8000, |i| {
            0.5 * (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / sr).sin()
        });
        let ex = LogMelExtractor::<f32>::new(cfg);
        let lm = ex
            .log_mel_unnormalized(&Tensor::from_array(x.into_dyn()))
            .unwrap()
            .to_array();
        for t in 0..lm.shape()[1] {
            let mut best = 0;
            for m in 0..lm.shape()[0] {
                if lm[[m, t]] > lm[[best, t]] {
                    best = m;
                }
            }
            assert_eq!(best, expect, "frame {t}");
        }
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let ex = LogMelExtractor::<f32>::default();
        let x = Tensor::from_array(ArrayD::zeros(IxDyn(&[1600])));
        let lm = ex.log_mel_unnormalized(&x).unwrap().to_array();
        let floor_log = (1e-10f32).ln();
        for &v in lm.iter() {
            assert!((v - floor_log).abs() < 1e-5, "value {v} vs floor {floor_log}");
        }
        let norm = ex.extract(&x).unwrap().to_array();
        for &v in norm.iter() {
            assert!(v.abs() < 1e-5);
        }
    }

    #[test]
    fn mean_normalization_zeroes_band_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array1::from_shape_simple_fn(6400, || rng.gen_range(-0.5f32..0.5));
        let ex = LogMelExtractor::<f32>::default();
        let f = ex.extract(&Tensor::from_array(x.into_dyn())).unwrap().to_array();
        for m in 0..f.shape()[0] {
            let mean: f32 = (0..f.shape()[1]).map(|t| f[[m, t]]).sum::<f32>() / f.shape()[1] as f32;
            assert!(mean.abs() < 1e-5, "band {m} mean {mean}");
        }
    }

    #[test]
    fn waveform_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1200;
        let x0: ArrayD<f64> =
            ArrayD::from_shape_simple_fn(IxDyn(&[n]), || rng.gen_range(-0.5..0.5));
        let ex = LogMelExtractor::<f64>::default();
        // A non-trivial scalar head over the features.
        let f = |x: &ArrayD<f64>| -> f64 {
            let t = Tensor::from_array(x.clone());
            let feats = ex.extract(&t).unwrap();
            (&feats * &feats).mean_all().item()
        };
        let x = Tensor::param_from(x0.clone());
        let feats = ex.extract(&x).unwrap();
        let loss = (&feats * &feats).mean_all();
        let g = grad(&loss, &[&x], None)[0].to_array();

        let h = 1e-6;
        for probe in 0..20 {
            let i = rng.gen_range(0..n);
            let mut p = x0.clone();
            p[IxDyn(&[i])] += h;
            let mut m = x0.clone();
            m[IxDyn(&[i])] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let an = g[IxDyn(&[i])];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            assert!(rel < 1e-4, "probe {probe} coord {i}: {an} vs {fd} (rel {rel})");
        }
    }
}
