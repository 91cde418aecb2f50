//! Waveform re-synthesis defense: a small non-autoregressive vocoder.
//!
//! The generator conditions gated dilated 1-d convolutions on the
//! hop-upsampled log-mel spectrogram plus a standard-normal latent of
//! waveform length, and emits a tanh-bounded waveform. Training
//! minimizes the multi-resolution STFT loss against the source
//! waveform; a waveform-domain adversarial term can be toggled on.
//! Re-synthesis discards the perturbation's fine structure, which is
//! what makes the defense useful against waveform-domain attacks.

use crate::autograd::{concat, grad, ConvSpec, Real, Storage, Tensor};
use crate::core::{RngFactory, Waveform};
use crate::dsp::{LogMelConfig, LogMelExtractor, MultiResStftLoss, StftLossResolution};
use crate::error::AdvoxError;
use crate::model::{Adam, Conv1dLayer, Tape};
use crate::Result;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture of the vocoder generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub mel: LogMelConfig,
    /// Residual width of the gated blocks.
    pub channels: usize,
    pub dilations: Vec<usize>,
    /// Affine input normalization for the log-mel conditioning.
    pub mel_shift: f64,
    pub mel_scale: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        VocoderConfig {
            mel: LogMelConfig::default(),
            channels: 24,
            dilations: vec![1, 2, 4, 8, 16, 32],
            mel_shift: -11.0,
            mel_scale: 0.125,
        }
    }
}

struct GatedBlock<F: Real> {
    filt: Conv1dLayer<F>,
    gate: Conv1dLayer<F>,
    res: Conv1dLayer<F>,
    skip: Conv1dLayer<F>,
}

/// Mel-conditioned waveform generator.
pub struct VocoderModel<F: Real> {
    pub cfg: VocoderConfig,
    extractor: LogMelExtractor<F>,
    cond_in: Conv1dLayer<F>,
    blocks: Vec<GatedBlock<F>>,
    out1: Conv1dLayer<F>,
    out2: Conv1dLayer<F>,
}

impl<F: Real> VocoderModel<F> {
    pub fn new(cfg: VocoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let cond_in = Conv1dLayer::new(cfg.mel.n_mels + 1, c, 1, ConvSpec::plain(1, 0), rng);
        let blocks = cfg
            .dilations
            .iter()
            .map(|&d| GatedBlock {
                filt: Conv1dLayer::new(c, c, 3, ConvSpec::new(1, d, d), rng),
                gate: Conv1dLayer::new(c, c, 3, ConvSpec::new(1, d, d), rng),
                res: Conv1dLayer::new(c, c, 1, ConvSpec::plain(1, 0), rng),
                skip: Conv1dLayer::new(c, c, 1, ConvSpec::plain(1, 0), rng),
            })
            .collect();
        let out1 = Conv1dLayer::new(c, c, 1, ConvSpec::plain(1, 0), rng);
        let out2 = Conv1dLayer::new(c, 1, 1, ConvSpec::plain(1, 0), rng);
        VocoderModel {
            extractor: LogMelExtractor::new(cfg.mel),
            cfg,
            cond_in,
            blocks,
            out1,
            out2,
        }
    }

    /// Synthesis length for an input of `n` samples: full hops only.
    pub fn synth_len(&self, n: usize) -> Result<usize> {
        let pad = self.cfg.mel.win_len - self.cfg.mel.hop;
        Ok(self.extractor.frames(n + pad)? * self.cfg.mel.hop)
    }

    /// Conv stack over `[b, n_mels + 1, L]` conditioning, producing a
    /// tanh-bounded waveform `[b, 1, L]`.
    fn net_forward(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let mut h = self.cond_in.apply(x, tape.as_deref_mut());
        let mut skip_sum: Option<Tensor<F>> = None;
        for b in &self.blocks {
            let a = &b.filt.apply(&h, tape.as_deref_mut()).tanh()
                * &b.gate.apply(&h, tape.as_deref_mut()).sigmoid();
            let s = b.skip.apply(&a, tape.as_deref_mut());
            skip_sum = Some(match skip_sum {
                Some(acc) => &acc + &s,
                None => s,
            });
            h = &h + &b.res.apply(&a, tape.as_deref_mut());
        }
        let s = skip_sum.expect("at least one block").relu();
        self.out2
            .apply(&self.out1.apply(&s, tape.as_deref_mut()).relu(), tape)
            .tanh()
    }

    /// Normalized, hop-upsampled conditioning `[n_mels, L]` for one
    /// waveform tensor, differentiable through the input.
    fn conditioning(&self, wave: &Tensor<F>) -> Result<Tensor<F>> {
        let n = wave.shape()[0];
        let pad = self.cfg.mel.win_len - self.cfg.mel.hop;
        let padded = wave.pad_into(&[0], &[n + pad]);
        let lm = self.extractor.log_mel_unnormalized(&padded)?;
        let norm = lm
            .add_scalar(F::from_f64c(-self.cfg.mel_shift))
            .scale(F::from_f64c(self.cfg.mel_scale));
        Ok(norm.repeat_interleave(1, self.cfg.mel.hop))
    }

    /// Re-synthesize one waveform tensor with an explicit latent of the
    /// same length. Differentiable end to end.
    pub fn forward_tensor(&self, wave: &Tensor<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        let n = wave.shape()[0];
        assert_eq!(z.shape(), &[n], "latent must have waveform length");
        let mel_up = self.conditioning(wave)?;
        let l = mel_up.shape()[1];
        let m = self.cfg.mel.n_mels;
        let x = concat(
            &[
                mel_up.reshape(&[1, m, l]),
                z.slice_view(&[(0, l)]).reshape(&[1, 1, l]),
            ],
            1,
        );
        Ok(self.net_forward(&x, None).reshape(&[l]))
    }

    pub fn params(&self) -> Vec<(String, Storage<F>)> {
        let mut out = vec![
            ("cond_in.w".to_string(), self.cond_in.w.clone()),
            ("cond_in.b".to_string(), self.cond_in.b.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.filt.w"), b.filt.w.clone()));
            out.push((format!("block.{i}.filt.b"), b.filt.b.clone()));
            out.push((format!("block.{i}.gate.w"), b.gate.w.clone()));
            out.push((format!("block.{i}.gate.b"), b.gate.b.clone()));
            out.push((format!("block.{i}.res.w"), b.res.w.clone()));
            out.push((format!("block.{i}.res.b"), b.res.b.clone()));
            out.push((format!("block.{i}.skip.w"), b.skip.w.clone()));
            out.push((format!("block.{i}.skip.b"), b.skip.b.clone()));
        }
        out.push(("out1.w".into(), self.out1.w.clone()));
        out.push(("out1.b".into(), self.out1.b.clone()));
        out.push(("out2.w".into(), self.out2.w.clone()));
        out.push(("out2.b".into(), self.out2.b.clone()));
        out
    }

    pub fn assign(&mut self, values: Vec<ArrayD<F>>) {
        assert_eq!(values.len(), self.params().len());
        let mut it = values.into_iter();
        self.cond_in.w = it.next().unwrap().into_shared();
        self.cond_in.b = it.next().unwrap().into_shared();
        for b in &mut self.blocks {
            b.filt.w = it.next().unwrap().into_shared();
            b.filt.b = it.next().unwrap().into_shared();
            b.gate.w = it.next().unwrap().into_shared();
            b.gate.b = it.next().unwrap().into_shared();
            b.res.w = it.next().unwrap().into_shared();
            b.res.b = it.next().unwrap().into_shared();
            b.skip.w = it.next().unwrap().into_shared();
            b.skip.b = it.next().unwrap().into_shared();
        }
        self.out1.w = it.next().unwrap().into_shared();
        self.out1.b = it.next().unwrap().into_shared();
        self.out2.w = it.next().unwrap().into_shared();
        self.out2.b = it.next().unwrap().into_shared();
    }

    pub fn cast<G: Real>(&self) -> VocoderModel<G> {
        let mut rng = crate::core::seeded_rng(0);
        let mut out = VocoderModel::<G>::new(self.cfg.clone(), &mut rng);
        let values: Vec<ArrayD<G>> = self
            .params()
            .into_iter()
            .map(|(_, p)| p.mapv(|v| G::from_f64c(v.to_f64().unwrap())).into_dyn())
            .collect();
        out.assign(values);
        out
    }
}

/// Draw a standard-normal latent of waveform length.
pub(crate) fn draw_latent<F: Real>(n: usize, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(&[n]), || F::from_f64c(normal.sample(rng)))
}

/// Re-synthesize a waveform. The output keeps the input's length: the
/// synthesis covers whole hops and the remainder is zero-filled.
pub fn vocoder_reconstruct<F: Real>(
    voc: &VocoderModel<F>,
    x: &Waveform,
    rng: &mut ChaCha8Rng,
) -> Result<Waveform> {
    let n = x.len();
    let samples: Array1<F> = x.samples().mapv(|v| F::from_f64c(v as f64));
    let wave = Tensor::from_array(samples.into_dyn());
    let z = Tensor::from_array(draw_latent::<F>(n, rng));
    let y = voc.forward_tensor(&wave, &z)?.to_array();
    let mut out = Array1::<f32>::zeros(n);
    for (o, v) in out.iter_mut().zip(y.iter()) {
        *o = v.to_f64().unwrap() as f32;
    }
    Waveform::new(out)
}

/// Waveform-domain critic for the optional adversarial term.
pub(crate) struct WaveCritic<F: Real> {
    convs: Vec<Conv1dLayer<F>>,
    out: Conv1dLayer<F>,
}

impl<F: Real> WaveCritic<F> {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let widths = [8usize, 16, 32];
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &widths {
            convs.push(Conv1dLayer::new(c_in, c, 9, ConvSpec::plain(2, 4), rng));
            c_in = c;
        }
        WaveCritic {
            convs,
            out: Conv1dLayer::new(c_in, 1, 3, ConvSpec::plain(1, 1), rng),
        }
    }

    /// Per-item critic scores `[b]` for `[b, 1, l]` waveforms.
    fn scores(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.apply(&h, tape.as_deref_mut()).leaky_relu(F::from_f64c(0.2));
        }
        self.out.apply(&h, tape).mean_axes(&[1, 2], false)
    }

    fn params(&self) -> Vec<Storage<F>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.w.clone());
            out.push(c.b.clone());
        }
        out.push(self.out.w.clone());
        out.push(self.out.b.clone());
        out
    }

    fn assign(&mut self, values: Vec<ArrayD<F>>) {
        let mut it = values.into_iter();
        for c in &mut self.convs {
            c.w = it.next().unwrap().into_shared();
            c.b = it.next().unwrap().into_shared();
        }
        self.out.w = it.next().unwrap().into_shared();
        self.out.b = it.next().unwrap().into_shared();
    }
}

/// Training hyperparameters for the vocoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training crop length in samples.
    pub crop_len: usize,
    pub lr: f64,
    /// Per-epoch learning-rate multiplier.
    pub lr_decay: f64,
    /// Probability that a training crop is replaced by digital
    /// silence. Teaches the floor-level conditioning the deployed
    /// defense sees outside speech, which random crops of voiced toy
    /// audio rarely cover.
    pub silence_fraction: f64,
    /// Enable the waveform-domain adversarial term.
    pub adversarial: bool,
    pub adv_weight: f64,
    pub resolutions: Vec<StftLossResolution>,
}

impl Default for VocoderTrainConfig {
    fn default() -> Self {
        VocoderTrainConfig {
            epochs: 10,
            batch_size: 4,
            crop_len: 4000,
            lr: 1e-3,
            lr_decay: 1.0,
            silence_fraction: 0.1,
            adversarial: false,
            adv_weight: 0.5,
            resolutions: crate::dsp::DEFAULT_RESOLUTIONS.to_vec(),
        }
    }
}

/// Training trace. `heldout_losses[0]` is the untrained model's
/// held-out loss; one more entry follows per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocoderTrainReport {
    pub epoch_losses: Vec<f64>,
    pub heldout_losses: Vec<f64>,
}

fn heldout_loss(
    voc: &VocoderModel<f32>,
    loss_bank: &MultiResStftLoss<f32>,
    heldout: &[Waveform],
    rngf: &RngFactory,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, w) in heldout.iter().enumerate() {
        let mut zrng = rngf.stream_n("vocoder/heldout-z", i as u64);
        let wave = Tensor::from_array(w.samples().clone().into_dyn());
        let z = Tensor::from_array(draw_latent::<f32>(w.len(), &mut zrng));
        let recon = voc.forward_tensor(&wave, &z)?;
        let l = recon.shape()[0];
        let target = wave.slice_view(&[(0, l)]);
        total += loss_bank.loss(&recon, &target)?.item() as f64;
    }
    Ok(total / heldout.len().max(1) as f64)
}

/// Train the vocoder as a re-synthesis autoencoder on benign
/// waveforms. Each epoch takes one random crop per utterance.
pub fn train_vocoder(
    cfg: &VocoderConfig,
    tc: &VocoderTrainConfig,
    data: &[Waveform],
    heldout: &[Waveform],
    rngf: &RngFactory,
) -> Result<(VocoderModel<f32>, VocoderTrainReport)> {
    assert!(!data.is_empty(), "training set is empty");
    let min_len = data.iter().map(|w| w.len()).min().unwrap();
    assert!(tc.crop_len <= min_len, "crop longer than shortest utterance");
    let max_win = tc.resolutions.iter().map(|r| r.win_len).max().unwrap();
    assert!(tc.crop_len >= max_win, "crop shorter than an analysis window");

    let mut model = VocoderModel::<f32>::new(cfg.clone(), &mut rngf.stream("vocoder/init"));
    let mut critic = WaveCritic::<f32>::new(&mut rngf.stream("vocoder/critic-init"));
    let mut gen_adam = Adam::<f32>::new(tc.lr);
    let mut critic_adam = Adam::<f32>::new(tc.lr);
    let loss_bank = MultiResStftLoss::new(&tc.resolutions);

    let mut heldout_losses = vec![heldout_loss(&model, &loss_bank, heldout, rngf)?];
    let mut epoch_losses = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rngf.stream_n("vocoder/shuffle", epoch as u64));
        let mut crop_rng = rngf.stream_n("vocoder/crop", epoch as u64);
        let mut z_rng = rngf.stream_n("vocoder/z", epoch as u64);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            // Stack per-crop conditioning as constants; gradients only
            // need to reach the generator weights.
            let mut conds = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            let mut synth = 0usize;
            for &i in chunk {
                let w = &data[i];
                let start = crop_rng.gen_range(0..=w.len() - tc.crop_len);
                let silent = tc.silence_fraction > 0.0 && crop_rng.gen_bool(tc.silence_fraction);
                let crop: Array1<f32> = if silent {
                    Array1::zeros(tc.crop_len)
                } else {
                    Array1::from_iter(w.samples().iter().skip(start).take(tc.crop_len).copied())
                };
                let crop_t = Tensor::from_array(crop.into_dyn());
                let mel_up = model.conditioning(&crop_t)?;
                let l = mel_up.shape()[1];
                synth = l;
                let z = Tensor::from_array(draw_latent::<f32>(tc.crop_len, &mut z_rng))
                    .slice_view(&[(0, l)]);
                let m = cfg.mel.n_mels;
                conds.push(concat(
                    &[mel_up.reshape(&[1, m, l]), z.reshape(&[1, 1, l])],
                    1,
                ));
                targets.push(crop_t.slice_view(&[(0, l)]));
            }
            let cond = Tensor::from_array(concat(&conds, 0).to_array());

            if tc.adversarial {
                // Critic step on detached reconstructions (hinge loss).
                // Real and fake share one batched pass so every critic
                // weight appears exactly once on the tape.
                let fake = model.net_forward(&cond, None).detach();
                let real = Tensor::from_array(
                    concat(
                        &targets
                            .iter()
                            .map(|t| t.reshape(&[1, 1, synth]))
                            .collect::<Vec<_>>(),
                        0,
                    )
                    .to_array(),
                );
                let b = chunk.len();
                let mut dtape = Tape::new();
                let s = critic.scores(&concat(&[real, fake], 0), Some(&mut dtape));
                let s_real = s.slice_view(&[(0, b)]);
                let s_fake = s.slice_view(&[(b, b)]);
                let d_loss = &s_real.neg().add_scalar(1.0).max_scalar(0.0).mean_all()
                    + &s_fake.add_scalar(1.0).max_scalar(0.0).mean_all();
                let leaf_refs: Vec<&Tensor<f32>> = dtape.leaves.iter().collect();
                let grads: Vec<ArrayD<f32>> = grad(&d_loss, &leaf_refs, None)
                    .into_iter()
                    .map(|g| g.to_array())
                    .collect();
                let updated = critic_adam.step(&critic.params(), &grads, &[]);
                critic.assign(updated);
            }

            let mut tape = Tape::new();
            let recon = model.net_forward(&cond, Some(&mut tape));
            let mut stft = Tensor::scalar(0.0f32);
            for (i, target) in targets.iter().enumerate() {
                let r = recon
                    .slice_view(&[(i, 1), (0, 1), (0, synth)])
                    .reshape(&[synth]);
                stft = &stft + &loss_bank.loss(&r, target)?;
            }
            stft = stft.scale(1.0 / chunk.len() as f32);
            let g_loss = if tc.adversarial {
                let adv = critic.scores(&recon, None).mean_all().neg();
                &stft + &adv.scale(tc.adv_weight as f32)
            } else {
                stft.clone()
            };

            let loss_val = stft.item() as f64;
            if !loss_val.is_finite() {
                return Err(AdvoxError::Divergence(format!(
                    "non-finite vocoder loss at epoch {epoch} (trace {epoch_losses:?})"
                )));
            }
            loss_sum += loss_val;
            batches += 1;

            let leaf_refs: Vec<&Tensor<f32>> = tape.leaves.iter().collect();
            let grads: Vec<ArrayD<f32>> = grad(&g_loss, &leaf_refs, None)
                .into_iter()
                .map(|g| g.to_array())
                .collect();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(AdvoxError::Divergence(format!(
                    "non-finite vocoder gradient at epoch {epoch}"
                )));
            }
            let storages: Vec<_> = model.params().into_iter().map(|(_, p)| p).collect();
            let updated = gen_adam.step(&storages, &grads, &[]);
            model.assign(updated);
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
        heldout_losses.push(heldout_loss(&model, &loss_bank, heldout, rngf)?);
        gen_adam.lr = gen_adam.lr * tc.lr_decay as f32;
        critic_adam.lr = critic_adam.lr * tc.lr_decay as f32;
    }

    Ok((model, VocoderTrainReport { epoch_losses, heldout_losses }))
}
