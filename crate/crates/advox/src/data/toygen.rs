//! Synthetic speaker corpus: harmonic stacks with per-speaker banded
//! spectral gains, rendered as syllable bursts.

use super::{Manifest, ManifestEntry, Split, ToyCorpus};
use crate::core::{RngFactory, SpeakerLabel, Waveform, SAMPLE_RATE};
use crate::Result;
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

const N_BANDS: usize = 8;
const BAND_LO_HZ: f64 = 100.0;
const BAND_HI_HZ: f64 = 6500.0;
const MAX_HARMONICS: usize = 48;

/// Corpus dimensions and synthesis knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_speakers: usize,
    pub train_per_speaker: usize,
    pub test_per_speaker: usize,
    pub enroll_per_speaker: usize,
    pub duration_s: f64,
    /// Additive white-noise standard deviation.
    pub noise_sigma: f64,
    /// Two-speaker mode with spectrally disjoint profiles.
    pub disjoint_band_pair: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_speakers: 40,
            train_per_speaker: 12,
            test_per_speaker: 30,
            enroll_per_speaker: 3,
            duration_s: 3.0,
            noise_sigma: 0.004,
            disjoint_band_pair: false,
        }
    }
}

impl ToySpec {
    /// Two speakers with non-overlapping spectral support; any sane
    /// model separates them perfectly.
    pub fn two_speaker_disjoint() -> Self {
        ToySpec {
            n_speakers: 2,
            disjoint_band_pair: true,
            ..ToySpec::default()
        }
    }
}

struct SpeakerProfile {
    f0: f64,
    band_log_gains: [f64; N_BANDS],
}

fn band_of(freq: f64) -> usize {
    if freq <= BAND_LO_HZ {
        return 0;
    }
    let ratio = (freq / BAND_LO_HZ).ln() / (BAND_HI_HZ / BAND_LO_HZ).ln();
    ((ratio * N_BANDS as f64) as usize).min(N_BANDS - 1)
}

fn speaker_profile(spec: &ToySpec, spk: usize, rngf: &RngFactory) -> SpeakerProfile {
    if spec.disjoint_band_pair {
        assert!(spk < 2, "disjoint-band mode is a two-speaker preset");
        let mut gains = [0.0f64; N_BANDS];
        for (b, g) in gains.iter_mut().enumerate() {
            let active = if spk == 0 { b < N_BANDS / 2 } else { b >= N_BANDS / 2 };
            *g = if active { 1.2 } else { -6.0 };
        }
        return SpeakerProfile { f0: if spk == 0 { 100.0 } else { 210.0 }, band_log_gains: gains };
    }
    let mut rng = rngf.stream(&format!("data/profile/{spk}"));
    let normal = Normal::new(0.0, 0.9).unwrap();
    let mut gains = [0.0f64; N_BANDS];
    for g in gains.iter_mut() {
        *g = normal.sample(&mut rng);
    }
    SpeakerProfile {
        f0: 85.0 + 4.5 * spk as f64 + rng.gen_range(-1.0..1.0),
        band_log_gains: gains,
    }
}

/// One utterance: syllable bursts separated by gaps, white noise under
/// everything. Each syllable re-jitters pitch and band gains so the
/// spectrum moves over time.
fn synth_utterance(profile: &SpeakerProfile, spec: &ToySpec, rng: &mut ChaCha8Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
    let mut x: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();

    let wobble = Normal::new(0.0, 0.25).unwrap();
    let ramp = (0.008 * sr) as usize;
    let mut t = (rng.gen_range(0.02..0.06) * sr) as usize;
    while t < n {
        let syl_len = (rng.gen_range(0.12..0.22) * sr) as usize;
        let gap = (rng.gen_range(0.05..0.10) * sr) as usize;
        let f0 = profile.f0 * (1.0 + rng.gen_range(-0.03..0.03));

        let mut gains = profile.band_log_gains;
        for g in gains.iter_mut() {
            *g += wobble.sample(rng);
        }
        let mut harmonics = Vec::new();
        for k in 1..=MAX_HARMONICS {
            let f = f0 * k as f64;
            if f >= BAND_HI_HZ {
                break;
            }
            let weight = gains[band_of(f)].exp() / (k as f64).powf(0.4);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            harmonics.push((std::f64::consts::TAU * f / sr, phase, weight));
        }

        let len = syl_len.min(n - t);
        let mut seg = vec![0.0f64; len];
        for &(step, phase, weight) in &harmonics {
            for (i, s) in seg.iter_mut().enumerate() {
                *s += weight * (phase + step * i as f64).sin();
            }
        }
        let peak = seg.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-9);
        let target = 0.35 * (1.0 + rng.gen_range(-0.15..0.15));
        let scale = target / peak;
        for (i, s) in seg.iter().enumerate() {
            let env = if i < ramp {
                i as f64 / ramp as f64
            } else if i + ramp > len {
                (len - i) as f64 / ramp as f64
            } else {
                1.0
            };
            x[t + i] += s * scale * env;
        }
        t += syl_len + gap;
    }

    Waveform::from_clamped(Array1::from_iter(x.into_iter().map(|v| v as f32)))
        .expect("synthesized audio is finite")
}

/// Generate the corpus in memory, deterministically per (speaker,
/// split, index) regardless of scheduling.
pub fn generate_toy_waves(spec: &ToySpec, rngf: &RngFactory) -> ToyCorpus {
    assert!(spec.n_speakers >= 2, "need at least two speakers");
    let profiles: Vec<SpeakerProfile> =
        (0..spec.n_speakers).map(|s| speaker_profile(spec, s, rngf)).collect();

    let make = |split: &str, per: usize| -> Vec<(Waveform, SpeakerLabel)> {
        let jobs: Vec<(usize, usize)> = (0..spec.n_speakers)
            .flat_map(|s| (0..per).map(move |u| (s, u)))
            .collect();
        jobs.into_par_iter()
            .map(|(s, u)| {
                let mut rng = rngf.stream(&format!("data/{split}/spk{s}/utt{u}"));
                (synth_utterance(&profiles[s], spec, &mut rng), SpeakerLabel(s))
            })
            .collect()
    };

    ToyCorpus {
        train: make("train", spec.train_per_speaker),
        test: make("test", spec.test_per_speaker),
        enroll: make("enroll", spec.enroll_per_speaker),
    }
}

/// Generate, write WAVs plus `manifest.csv` under `out_dir`, and return
/// the manifest.
pub fn generate_toy_dataset(spec: &ToySpec, rngf: &RngFactory, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = generate_toy_waves(spec, rngf);
    let mut entries = Vec::new();
    for (split, waves) in [
        (Split::Train, &corpus.train),
        (Split::Test, &corpus.test),
        (Split::Enroll, &corpus.enroll),
    ] {
        let mut per_speaker_idx = std::collections::HashMap::new();
        for (w, spk) in waves {
            let u = per_speaker_idx.entry(spk.index()).or_insert(0usize);
            let utt_id = format!("spk{:03}_{}{:03}", spk.index(), split, u);
            *u += 1;
            let path = out_dir.join(format!("{utt_id}.wav"));
            crate::dsp::save_waveform(&path, w)?;
            entries.push(ManifestEntry { utt_id, path, speaker: *spk, split });
        }
    }
    let manifest = Manifest { entries };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec() -> ToySpec {
        ToySpec {
            n_speakers: 3,
            train_per_speaker: 2,
            test_per_speaker: 1,
            enroll_per_speaker: 0,
            duration_s: 0.6,
            ..ToySpec::default()
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let a = generate_toy_waves(&quick_spec(), &RngFactory::new(9));
        let b = generate_toy_waves(&quick_spec(), &RngFactory::new(9));
        assert_eq!(a.train.len(), b.train.len());
        for ((wa, la), (wb, lb)) in a.train.iter().zip(&b.train) {
            assert_eq!(la, lb);
            assert_eq!(wa.samples(), wb.samples());
        }
        let c = generate_toy_waves(&quick_spec(), &RngFactory::new(10));
        assert_ne!(a.train[0].0.samples(), c.train[0].0.samples());
    }

    #[test]
    fn utterance_counts_and_labels_match_the_spec() {
        let corpus = generate_toy_waves(&quick_spec(), &RngFactory::new(1));
        assert_eq!(corpus.train.len(), 6);
        assert_eq!(corpus.test.len(), 3);
        assert!(corpus.enroll.is_empty());
        for (w, l) in &corpus.train {
            assert!(l.index() < 3);
            assert_eq!(w.len(), (0.6 * SAMPLE_RATE as f64).round() as usize);
            assert!(w.rms() > 0.001, "utterance is silent");
        }
    }

    #[test]
    fn disjoint_pair_occupies_different_bands() {
        let spec = ToySpec {
            train_per_speaker: 1,
            test_per_speaker: 0,
            enroll_per_speaker: 0,
            duration_s: 1.0,
            ..ToySpec::two_speaker_disjoint()
        };
        let corpus = generate_toy_waves(&spec, &RngFactory::new(4));
        let ex = crate::dsp::LogMelExtractor::<f32>::default();
        let energy = |w: &Waveform| {
            let f = ex.extract_value(w.samples()).unwrap();
            // Mean absolute deviation per mel band: active bands swing.
            f.map_axis(ndarray::Axis(1), |row| {
                row.iter().map(|v| v.abs()).sum::<f32>() / row.len() as f32
            })
        };
        let e0 = energy(&corpus.train[0].0);
        let e1 = energy(&corpus.train[1].0);
        let lows = |e: &Array1<f32>| e.iter().take(20).sum::<f32>();
        let highs = |e: &Array1<f32>| e.iter().skip(60).sum::<f32>();
        assert!(lows(&e0) > lows(&e1), "speaker 0 should dominate low bands");
        assert!(highs(&e1) > highs(&e0), "speaker 1 should dominate high bands");
    }
}
