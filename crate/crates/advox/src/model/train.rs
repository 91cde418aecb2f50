//! Training loops: supervised, Gaussian-noise fine-tuning, and
//! adversarial training. One inner loop serves all three so that an
//! adversarial run with a zero budget is bit-identical to plain
//! training.

use super::optim::Adam;
use super::xvector::{aam_softmax_loss, batch_features, features_tensor, XVectorClassifier, XVectorConfig};
use super::Tape;
use crate::autograd::{grad, Tensor};
use crate::core::{RngFactory, SpeakerLabel, Waveform};
use crate::dsp::{LogMelConfig, LogMelExtractor};
use crate::{AdvoxError, Result};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Optimization hyperparameters shared by every training entry point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-utterance Gaussian augmentation noise, sigma ~ U[0, this].
    /// Stands in for real-noise augmentation at desk scale.
    pub aug_sigma_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 20, batch_size: 16, lr: 1e-3, aug_sigma_max: 0.02 }
    }
}

/// Which parameters a fine-tuning pass may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneScope {
    /// Embedding layer and classification head only; the encoder stays
    /// frozen.
    Head,
    Full,
}

/// Loss trajectory and held-out quality of a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_accuracy: f64,
}

pub type LabeledWave = (Waveform, SpeakerLabel);

/// Per-sample waveform transform applied after augmentation, before
/// feature extraction. Adversarial training plugs in here.
type SampleHook<'a> =
    &'a dyn Fn(&XVectorClassifier<f32>, &Waveform, SpeakerLabel, &mut ChaCha8Rng) -> Result<Waveform>;

pub(crate) fn add_gaussian(x: &Waveform, sigma: f64, rng: &mut ChaCha8Rng) -> Waveform {
    if sigma <= 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let noisy = x.samples().mapv(|s| {
        let n: f64 = normal.sample(rng);
        (s as f64 + n).clamp(-1.0, 1.0) as f32
    });
    Waveform::new(noisy).expect("clamped noisy waveform is valid")
}

/// Accuracy of hard predictions over a labeled set.
pub fn classifier_accuracy(
    model: &XVectorClassifier<f32>,
    extractor: &LogMelExtractor<f32>,
    data: &[LabeledWave],
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in data.chunks(32) {
        let waves: Vec<Array1<f32>> = chunk.iter().map(|(w, _)| w.samples().clone()).collect();
        let flat = batch_features(extractor, &waves)?;
        let preds = model.predict(&features_tensor(&flat, model.cfg.n_mels));
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(p, (_, l))| **p == l.index())
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

struct LoopSpec<'a> {
    train_cfg: &'a TrainConfig,
    sigma_range: (f64, f64),
    frozen: Vec<bool>,
    hook: Option<SampleHook<'a>>,
    stream_prefix: &'a str,
}

fn run_epochs(
    model: &mut XVectorClassifier<f32>,
    extractor: &LogMelExtractor<f32>,
    data: &[LabeledWave],
    heldout: &[LabeledWave],
    rngf: &RngFactory,
    spec: LoopSpec<'_>,
) -> Result<TrainReport> {
    assert!(!data.is_empty(), "training set is empty");
    let margin = model.cfg.aam_margin;
    let scale = model.cfg.aam_scale;
    let mut adam = Adam::<f32>::new(spec.train_cfg.lr);
    let mut epoch_losses = Vec::with_capacity(spec.train_cfg.epochs);

    for epoch in 0..spec.train_cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rngf.stream_n(&format!("{}/shuffle", spec.stream_prefix), epoch as u64));
        let mut aug_rng = rngf.stream_n(&format!("{}/augment", spec.stream_prefix), epoch as u64);
        let mut hook_rng = rngf.stream_n(&format!("{}/hook", spec.stream_prefix), epoch as u64);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(spec.train_cfg.batch_size) {
            let mut waves = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (w, l) = &data[i];
                let sigma = if spec.sigma_range.1 > 0.0 {
                    aug_rng.gen_range(spec.sigma_range.0..=spec.sigma_range.1)
                } else {
                    0.0
                };
                let mut x = add_gaussian(w, sigma, &mut aug_rng);
                if let Some(hook) = spec.hook {
                    x = hook(model, &x, *l, &mut hook_rng)?;
                }
                waves.push(x.samples().clone());
                labels.push(l.index());
            }
            let flat = batch_features(extractor, &waves)?;
            let feats = features_tensor(&flat, model.cfg.n_mels);
            let mut tape = Tape::new();
            let cos = model.cosines(&feats, Some(&mut tape));
            let loss = aam_softmax_loss(&cos, &labels, margin, scale);
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(AdvoxError::Divergence(format!(
                    "non-finite loss {loss_val} at epoch {epoch}"
                )));
            }
            loss_sum += loss_val;
            batches += 1;

            let leaf_refs: Vec<&Tensor<f32>> = tape.leaves.iter().collect();
            let grads: Vec<ndarray::ArrayD<f32>> = grad(&loss, &leaf_refs, None)
                .into_iter()
                .map(|g| g.to_array())
                .collect();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(AdvoxError::Divergence(format!(
                    "non-finite gradient at epoch {epoch}"
                )));
            }
            let storages: Vec<_> = model.params().into_iter().map(|(_, p)| p).collect();
            let updated = adam.step(&storages, &grads, &spec.frozen);
            model.assign(updated);
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }

    let heldout_accuracy = classifier_accuracy(model, extractor, heldout)?;
    Ok(TrainReport { epoch_losses, heldout_accuracy })
}

/// Train a classifier from scratch.
pub fn train_classifier(
    cfg: &XVectorConfig,
    train_cfg: &TrainConfig,
    data: &[LabeledWave],
    heldout: &[LabeledWave],
    rngf: &RngFactory,
) -> Result<(XVectorClassifier<f32>, TrainReport)> {
    let mut model = XVectorClassifier::new(cfg.clone(), &mut rngf.stream("train/init"));
    let extractor = LogMelExtractor::new(LogMelConfig {
        n_mels: cfg.n_mels,
        ..LogMelConfig::default()
    });
    let n_params = model.params().len();
    let report = run_epochs(
        &mut model,
        &extractor,
        data,
        heldout,
        rngf,
        LoopSpec {
            train_cfg,
            sigma_range: (0.0, train_cfg.aug_sigma_max),
            frozen: vec![false; n_params],
            hook: None,
            stream_prefix: "train",
        },
    )?;
    Ok((model, report))
}

/// Continue training under Gaussian input noise, sigma drawn uniformly
/// per utterance. `Head` scope freezes the convolutional encoder.
pub fn fine_tune_gaussian(
    model: &mut XVectorClassifier<f32>,
    train_cfg: &TrainConfig,
    sigma_range: (f64, f64),
    scope: FineTuneScope,
    data: &[LabeledWave],
    heldout: &[LabeledWave],
    rngf: &RngFactory,
) -> Result<TrainReport> {
    assert!(sigma_range.0 >= 0.0 && sigma_range.1 >= sigma_range.0);
    let extractor = LogMelExtractor::new(LogMelConfig {
        n_mels: model.cfg.n_mels,
        ..LogMelConfig::default()
    });
    let frozen: Vec<bool> = model
        .params()
        .iter()
        .map(|(name, _)| scope == FineTuneScope::Head && name.starts_with("encoder."))
        .collect();
    run_epochs(
        model,
        &extractor,
        data,
        heldout,
        rngf,
        LoopSpec {
            train_cfg,
            sigma_range,
            frozen,
            hook: None,
            stream_prefix: "finetune",
        },
    )
}

/// Attack family used for the inner maximization of adversarial
/// training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvTrainAttack {
    Fgsm,
    /// Iterative sign attack, step `eps / 5`, 10 iterations.
    Pgd,
}

/// Adversarial training: each batch sample is replaced by an attack on
/// the current model before the gradient step. A budget of exactly zero
/// skips perturbation entirely, which makes the run bit-identical to
/// plain training under the same seed.
pub fn adversarial_train(
    cfg: &XVectorConfig,
    train_cfg: &TrainConfig,
    attack: AdvTrainAttack,
    eps: f32,
    data: &[LabeledWave],
    heldout: &[LabeledWave],
    rngf: &RngFactory,
) -> Result<(XVectorClassifier<f32>, TrainReport)> {
    use crate::attacks::{bim, fgsm, AttackConfig, BareTarget};

    let mut model = XVectorClassifier::new(cfg.clone(), &mut rngf.stream("train/init"));
    let extractor = LogMelExtractor::new(LogMelConfig {
        n_mels: cfg.n_mels,
        ..LogMelConfig::default()
    });
    let hook = move |m: &XVectorClassifier<f32>,
                     x: &Waveform,
                     label: SpeakerLabel,
                     rng: &mut ChaCha8Rng|
          -> Result<Waveform> {
        if eps == 0.0 {
            return Ok(x.clone());
        }
        let inner_extractor = LogMelExtractor::<f32>::new(LogMelConfig {
            n_mels: m.cfg.n_mels,
            ..LogMelConfig::default()
        });
        let target = BareTarget::new(m, &inner_extractor);
        let result = match attack {
            AdvTrainAttack::Fgsm => fgsm(&target, x, label, &AttackConfig::fgsm(eps), rng)?,
            AdvTrainAttack::Pgd => bim(
                &target,
                x,
                label,
                &AttackConfig::bim(eps, eps / 5.0, 10),
                rng,
            )?,
        };
        Ok(result.adversarial)
    };
    let n_params = model.params().len();
    let report = run_epochs(
        &mut model,
        &extractor,
        data,
        heldout,
        rngf,
        LoopSpec {
            train_cfg,
            sigma_range: (0.0, train_cfg.aug_sigma_max),
            frozen: vec![false; n_params],
            hook: Some(&hook),
            stream_prefix: "train",
        },
    )?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::SAMPLE_RATE;
    use ndarray::Array1;

    fn tone_cfg() -> XVectorConfig {
        XVectorConfig {
            n_mels: 8,
            encoder_channels: vec![2, 4],
            embed_dim: 6,
            n_classes: 2,
            aam_margin: 0.2,
            aam_scale: 20.0,
        }
    }

    /// Half-second tones: speaker 0 low, speaker 1 high, with slight
    /// per-utterance detuning so utterances differ.
    fn tone_data(per_speaker: usize, seed_shift: usize) -> Vec<LabeledWave> {
        let n = (SAMPLE_RATE / 2) as usize;
        let mut out = Vec::new();
        for spk in 0..2usize {
            let base = if spk == 0 { 300.0 } else { 2400.0 };
            for u in 0..per_speaker {
                let f = base * (1.0 + 0.01 * (u + seed_shift) as f32);
                let w = Array1::from_shape_fn(n, |t| {
                    let ph = 2.0 * std::f32::consts::PI * f * t as f32 / SAMPLE_RATE as f32;
                    0.4 * ph.sin()
                });
                out.push((Waveform::new(w).unwrap(), SpeakerLabel(spk)));
            }
        }
        out
    }

    #[test]
    fn learns_separable_tones_and_loss_drops() {
        let train = tone_data(6, 0);
        let heldout = tone_data(2, 50);
        let cfg = TrainConfig { epochs: 16, batch_size: 4, lr: 5e-3, aug_sigma_max: 0.0 };
        let rngf = RngFactory::new(11);
        let (_, report) = train_classifier(&tone_cfg(), &cfg, &train, &heldout, &rngf).unwrap();
        assert_eq!(report.heldout_accuracy, 1.0, "losses: {:?}", report.epoch_losses);
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < 0.5 * first, "loss did not halve: {first} -> {last}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let train = tone_data(3, 0);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, aug_sigma_max: 0.02 };
        let run = || {
            let rngf = RngFactory::new(7);
            train_classifier(&tone_cfg(), &cfg, &train, &train, &rngf).unwrap()
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        for ((_, a), (_, b)) in m1.params().into_iter().zip(m2.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_budget_adversarial_training_is_bitwise_plain_training() {
        let train = tone_data(3, 0);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, lr: 1e-3, aug_sigma_max: 0.01 };
        let rngf1 = RngFactory::new(5);
        let rngf2 = RngFactory::new(5);
        let (plain, _) = train_classifier(&tone_cfg(), &cfg, &train, &train, &rngf1).unwrap();
        let (adv, _) = adversarial_train(
            &tone_cfg(),
            &cfg,
            AdvTrainAttack::Pgd,
            0.0,
            &train,
            &train,
            &rngf2,
        )
        .unwrap();
        for ((_, a), (_, b)) in plain.params().into_iter().zip(adv.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nonfinite_loss_aborts_with_divergence() {
        let train = tone_data(2, 0);
        let rngf = RngFactory::new(3);
        let mut model =
            XVectorClassifier::new(tone_cfg(), &mut rngf.stream("train/init"));
        // Poison the embedding weight: upstream relu stages absorb NaN
        // (max against zero drops it), the dense layer does not.
        let mut params: Vec<ndarray::ArrayD<f32>> =
            model.params().into_iter().map(|(_, p)| p.to_owned()).collect();
        let embed_idx = model
            .params()
            .iter()
            .position(|(n, _)| n == "embed.w")
            .unwrap();
        params[embed_idx][[0, 0]] = f32::NAN;
        model.assign(params);
        let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 1e-3, aug_sigma_max: 0.0 };
        let err = fine_tune_gaussian(
            &mut model,
            &cfg,
            (0.0, 0.0),
            FineTuneScope::Full,
            &train,
            &train,
            &rngf,
        )
        .unwrap_err();
        assert!(matches!(err, AdvoxError::Divergence(_)), "got {err}");
    }

    #[test]
    fn head_scope_freezes_the_encoder() {
        let train = tone_data(2, 0);
        let rngf = RngFactory::new(9);
        let mut model =
            XVectorClassifier::new(tone_cfg(), &mut rngf.stream("train/init"));
        let before: Vec<_> = model.params();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, lr: 1e-2, aug_sigma_max: 0.0 };
        fine_tune_gaussian(
            &mut model,
            &cfg,
            (0.0, 0.1),
            FineTuneScope::Head,
            &train,
            &train,
            &rngf,
        )
        .unwrap();
        for ((name, a), (_, b)) in before.into_iter().zip(model.params()) {
            if name.starts_with("encoder.") {
                assert_eq!(a, b, "{name} moved under head-only scope");
            } else {
                assert_ne!(a, b, "{name} did not move");
            }
        }
    }
}
