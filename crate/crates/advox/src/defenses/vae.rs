//! Denoising variational autoencoder over log-mel spectrograms.
//!
//! The encoder downsamples the spectrogram by 2^(blocks-1) in both axes
//! and emits the posterior mean; the posterior variance is a trainable
//! scalar. The decoder mirrors the encoder with nearest-neighbor
//! upsampling and predicts the reconstruction mean, again with a
//! trainable scalar variance. Training maximizes a denoising ELBO: the
//! posterior is computed from a noise-augmented waveform's spectrogram
//! while the reconstruction targets the clean one.

use crate::autograd::{grad, ConvSpec, Real, Storage, Tensor};
use crate::core::{RngFactory, Waveform};
use crate::dsp::LogMelExtractor;
use crate::error::AdvoxError;
use crate::model::{leaf, Adam, Conv2dLayer, Tape};
use crate::Result;
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

/// Architecture of the spectrogram VAE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub n_mels: usize,
    /// Encoder channel widths; the first convolution keeps resolution,
    /// every later one halves both axes.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            n_mels: 80,
            channels: vec![16, 32, 64, 64],
            latent_channels: 10,
        }
    }
}

impl VaeConfig {
    /// Downsampling factor of the encoder along each axis.
    pub fn downsample(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

fn ceil_halve(n: usize, times: usize) -> usize {
    let mut n = n;
    for _ in 0..times {
        n = n.div_ceil(2);
    }
    n
}

/// Denoising VAE with trainable scalar log-variances.
pub struct VaeModel<F: Real> {
    pub cfg: VaeConfig,
    enc: Vec<Conv2dLayer<F>>,
    enc_mu: Conv2dLayer<F>,
    enc_logvar: Storage<F>,
    dec_in: Conv2dLayer<F>,
    dec: Vec<Conv2dLayer<F>>,
    dec_out: Conv2dLayer<F>,
    dec_logvar: Storage<F>,
}

/// Loss pieces for one training batch.
pub(crate) struct VaeBatchLoss<F: Real> {
    pub loss: Tensor<F>,
    pub elbo: f64,
    pub kl: f64,
}

impl<F: Real> VaeModel<F> {
    pub fn new(cfg: VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.channels.len() >= 2, "need at least one downsampling block");
        let mut enc = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            enc.push(Conv2dLayer::new(c_in, c, 3, ConvSpec::plain(stride, 1), rng));
            c_in = c;
        }
        let enc_mu = Conv2dLayer::new(c_in, cfg.latent_channels, 1, ConvSpec::plain(1, 0), rng);
        let dec_in = Conv2dLayer::new(cfg.latent_channels, c_in, 1, ConvSpec::plain(1, 0), rng);
        let mut dec = Vec::new();
        let mut d_in = c_in;
        for &c in cfg.channels.iter().rev().skip(1) {
            dec.push(Conv2dLayer::new(d_in, c, 3, ConvSpec::plain(1, 1), rng));
            d_in = c;
        }
        let dec_out = Conv2dLayer::new(d_in, 1, 3, ConvSpec::plain(1, 1), rng);
        VaeModel {
            cfg,
            enc,
            enc_mu,
            enc_logvar: ArrayD::zeros(IxDyn(&[1])).into_shared(),
            dec_in,
            dec,
            dec_out,
            dec_logvar: ArrayD::zeros(IxDyn(&[1])).into_shared(),
        }
    }

    /// Latent shape `[latent_channels, mels', frames']` for a spectrogram
    /// of the given size.
    pub fn latent_dims(&self, mels: usize, frames: usize) -> (usize, usize, usize) {
        let halvings = self.cfg.channels.len() - 1;
        (
            self.cfg.latent_channels,
            ceil_halve(mels, halvings),
            ceil_halve(frames, halvings),
        )
    }

    /// Posterior mean for input `[b, 1, mels, frames]`.
    fn encode(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let mut h = x.clone();
        for c in &self.enc {
            h = c.apply(&h, tape.as_deref_mut()).relu();
        }
        self.enc_mu.apply(&h, tape)
    }

    /// Reconstruction mean for latent `[b, L, mels', frames']`, cropped
    /// to `[b, 1, mels, frames]`.
    fn decode(
        &self,
        z: &Tensor<F>,
        mels: usize,
        frames: usize,
        mut tape: Option<&mut Tape<F>>,
    ) -> Tensor<F> {
        let mut h = self.dec_in.apply(z, tape.as_deref_mut()).relu();
        for c in &self.dec {
            h = h.repeat_interleave(2, 2).repeat_interleave(3, 2);
            h = c.apply(&h, tape.as_deref_mut()).relu();
        }
        let out = self.dec_out.apply(&h, tape);
        let b = out.shape()[0];
        out.slice_view(&[(0, b), (0, 1), (0, mels), (0, frames)])
    }

    /// Shape-preserving denoising pass over one spectrogram `[m, t]`.
    /// The latent draw comes from `rng`, so seeded calls are
    /// reproducible, and the graph stays differentiable end to end.
    pub fn denoise_tensor(&self, spec: &Tensor<F>, rng: &mut ChaCha8Rng) -> Tensor<F> {
        let (m, t) = (spec.shape()[0], spec.shape()[1]);
        let x = spec.reshape(&[1, 1, m, t]);
        let mu = self.encode(&x, None);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let eps = ArrayD::from_shape_simple_fn(IxDyn(mu.shape()), || {
            F::from_f64c(normal.sample(rng))
        });
        let sigma = Tensor::constant(self.enc_logvar.clone())
            .scale(F::from_f64c(0.5))
            .exp()
            .reshape(&[1, 1, 1, 1])
            .broadcast_to(mu.shape());
        let z = &mu + &(&Tensor::from_array(eps) * &sigma);
        self.decode(&z, m, t, None).reshape(&[m, t])
    }

    /// Denoising ELBO for one batch. `noisy` feeds the posterior while
    /// `clean` is the reconstruction target; both are `[b, 1, m, t]`.
    pub(crate) fn elbo_loss(
        &self,
        noisy: &Tensor<F>,
        clean: &Tensor<F>,
        eps: &ArrayD<F>,
        tape: &mut Tape<F>,
    ) -> VaeBatchLoss<F> {
        let b = noisy.shape()[0] as f64;
        let (m, t) = (noisy.shape()[2], noisy.shape()[3]);

        let mu = self.encode(noisy, Some(tape));
        let latent_per = (mu.numel() as f64) / b;
        let enc_lv = leaf(&self.enc_logvar, Some(tape)).reshape(&[]);
        let sigma = enc_lv.scale(F::from_f64c(0.5)).exp();
        let z = &mu
            + &(&Tensor::from_array(eps.clone())
                * &sigma.reshape(&[1, 1, 1, 1]).broadcast_to(mu.shape()));

        let recon = self.decode(&z, m, t, Some(tape));
        let dec_lv = leaf(&self.dec_logvar, Some(tape)).reshape(&[]);

        // KL(q || N(0, I)) with a shared scalar posterior variance.
        let mu_sq = (&mu * &mu).sum_all();
        let var_term = &(&enc_lv.exp() - &enc_lv) + &Tensor::scalar(F::from_f64c(-1.0));
        let kl = (&mu_sq + &var_term.scale(F::from_f64c(b * latent_per)))
            .scale(F::from_f64c(0.5 / b));

        // Gaussian negative log-likelihood of the clean target.
        let obs_per = (m * t) as f64;
        let diff = &recon - clean;
        let sse = (&diff * &diff).sum_all();
        let nll = (&(&sse * &dec_lv.neg().exp())
            + &dec_lv
                .add_scalar(F::from_f64c(LN_2PI))
                .scale(F::from_f64c(b * obs_per)))
            .scale(F::from_f64c(0.5 / b));

        let loss = &nll + &kl;
        let kl_val = kl.item().to_f64().unwrap();
        VaeBatchLoss {
            elbo: -loss.item().to_f64().unwrap(),
            kl: kl_val,
            loss,
        }
    }

    /// Named parameters in tape traversal order.
    pub fn params(&self) -> Vec<(String, Storage<F>)> {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            out.push((format!("enc.{i}.w"), c.w.clone()));
            out.push((format!("enc.{i}.b"), c.b.clone()));
        }
        out.push(("enc_mu.w".into(), self.enc_mu.w.clone()));
        out.push(("enc_mu.b".into(), self.enc_mu.b.clone()));
        out.push(("enc_logvar".into(), self.enc_logvar.clone()));
        out.push(("dec_in.w".into(), self.dec_in.w.clone()));
        out.push(("dec_in.b".into(), self.dec_in.b.clone()));
        for (i, c) in self.dec.iter().enumerate() {
            out.push((format!("dec.{i}.w"), c.w.clone()));
            out.push((format!("dec.{i}.b"), c.b.clone()));
        }
        out.push(("dec_out.w".into(), self.dec_out.w.clone()));
        out.push(("dec_out.b".into(), self.dec_out.b.clone()));
        out.push(("dec_logvar".into(), self.dec_logvar.clone()));
        out
    }

    pub fn assign(&mut self, values: Vec<ArrayD<F>>) {
        assert_eq!(values.len(), self.params().len());
        let mut it = values.into_iter();
        for c in &mut self.enc {
            c.w = it.next().unwrap().into_shared();
            c.b = it.next().unwrap().into_shared();
        }
        self.enc_mu.w = it.next().unwrap().into_shared();
        self.enc_mu.b = it.next().unwrap().into_shared();
        self.enc_logvar = it.next().unwrap().into_shared();
        self.dec_in.w = it.next().unwrap().into_shared();
        self.dec_in.b = it.next().unwrap().into_shared();
        for c in &mut self.dec {
            c.w = it.next().unwrap().into_shared();
            c.b = it.next().unwrap().into_shared();
        }
        self.dec_out.w = it.next().unwrap().into_shared();
        self.dec_out.b = it.next().unwrap().into_shared();
        self.dec_logvar = it.next().unwrap().into_shared();
    }

    pub fn cast<G: Real>(&self) -> VaeModel<G> {
        let mut rng = crate::core::seeded_rng(0);
        let mut out = VaeModel::<G>::new(self.cfg.clone(), &mut rng);
        let values: Vec<ArrayD<G>> = self
            .params()
            .into_iter()
            .map(|(_, p)| p.mapv(|v| G::from_f64c(v.to_f64().unwrap())).into_dyn())
            .collect();
        out.assign(values);
        out
    }
}

/// Value-level denoising of a spectrogram; the estimate is the decoder
/// mean for one seeded latent draw.
pub fn vae_denoise<F: Real>(
    vae: &VaeModel<F>,
    x_spec: &Array2<F>,
    rng: &mut ChaCha8Rng,
) -> Array2<F> {
    let t = Tensor::from_array(x_spec.clone().into_dyn());
    vae.denoise_tensor(&t, rng)
        .to_array()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-d reconstruction")
}

/// Training hyperparameters for the denoising VAE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Waveform-domain noise added to the posterior input.
    pub noise_sigma: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            epochs: 8,
            batch_size: 8,
            lr: 1e-3,
            noise_sigma: 0.02,
        }
    }
}

/// Training trace: per-epoch mean ELBO and the smallest KL seen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub epoch_elbos: Vec<f64>,
    pub min_kl: f64,
}

fn stack_specs(specs: &[Array2<f32>]) -> Array4<f32> {
    let (m, t) = specs[0].dim();
    let mut out = Array4::zeros((specs.len(), 1, m, t));
    for (i, s) in specs.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(s);
    }
    out
}

/// Train a denoising VAE on benign waveforms. KL stays nonnegative by
/// construction; a non-finite loss aborts with the trace so far.
pub fn train_vae(
    cfg: &VaeConfig,
    tc: &VaeTrainConfig,
    data: &[Waveform],
    extractor: &LogMelExtractor<f32>,
    rngf: &RngFactory,
) -> Result<(VaeModel<f32>, VaeTrainReport)> {
    assert!(!data.is_empty(), "training set is empty");
    let mut model = VaeModel::<f32>::new(cfg.clone(), &mut rngf.stream("vae/init"));
    let mut adam = Adam::<f32>::new(tc.lr);

    let clean: Vec<Array2<f32>> = data
        .iter()
        .map(|w| extractor.log_mel_value(w.samples()))
        .collect::<Result<_>>()?;

    // Group utterances by spectrogram shape so batches stack cleanly.
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, s) in clean.iter().enumerate() {
        groups.entry(s.dim()).or_default().push(i);
    }

    let mut epoch_elbos = Vec::with_capacity(tc.epochs);
    let mut min_kl = f64::INFINITY;
    for epoch in 0..tc.epochs {
        let mut shuffle_rng = rngf.stream_n("vae/shuffle", epoch as u64);
        let mut noise_rng = rngf.stream_n("vae/noise", epoch as u64);
        let mut eps_rng = rngf.stream_n("vae/eps", epoch as u64);
        let normal = Normal::new(0.0, 1.0).unwrap();

        let mut elbo_sum = 0.0;
        let mut batches = 0usize;
        for idx in groups.values() {
            let mut order = idx.clone();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(tc.batch_size) {
                let noisy: Vec<Array2<f32>> = chunk
                    .iter()
                    .map(|&i| {
                        let w = crate::model::train::add_gaussian(
                            &data[i],
                            tc.noise_sigma,
                            &mut noise_rng,
                        );
                        extractor.log_mel_value(w.samples())
                    })
                    .collect::<Result<_>>()?;
                let clean_batch: Vec<Array2<f32>> =
                    chunk.iter().map(|&i| clean[i].clone()).collect();

                let noisy_t = Tensor::from_array(stack_specs(&noisy).into_dyn());
                let clean_t = Tensor::from_array(stack_specs(&clean_batch).into_dyn());
                let (m, t) = clean_batch[0].dim();
                let (lc, lm, lt) = model.latent_dims(m, t);
                let eps = ArrayD::from_shape_simple_fn(IxDyn(&[chunk.len(), lc, lm, lt]), || {
                    normal.sample(&mut eps_rng) as f32
                });

                let mut tape = Tape::new();
                let batch = model.elbo_loss(&noisy_t, &clean_t, &eps, &mut tape);
                if !batch.elbo.is_finite() {
                    return Err(AdvoxError::Divergence(format!(
                        "non-finite ELBO at epoch {epoch} (trace {epoch_elbos:?})"
                    )));
                }
                min_kl = min_kl.min(batch.kl);
                elbo_sum += batch.elbo;
                batches += 1;

                let leaf_refs: Vec<&Tensor<f32>> = tape.leaves.iter().collect();
                let grads: Vec<ArrayD<f32>> = grad(&batch.loss, &leaf_refs, None)
                    .into_iter()
                    .map(|g| g.to_array())
                    .collect();
                let storages: Vec<_> = model.params().into_iter().map(|(_, p)| p).collect();
                let updated = adam.step(&storages, &grads, &[]);
                model.assign(updated);
            }
        }
        epoch_elbos.push(elbo_sum / batches.max(1) as f64);
    }

    Ok((model, VaeTrainReport { epoch_elbos, min_kl }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_of;
    use crate::core::SAMPLE_RATE;
    use ndarray::Array1;

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            n_mels: 80,
            channels: vec![4, 4, 8, 8],
            latent_channels: 4,
        }
    }

    fn tone(freq: f64, secs: f64, amp: f32) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let arr = Array1::from_shape_fn(n, |i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            // Amplitude-modulated tone so the spectrogram has structure
            // that survives training.
            (amp as f64 * (2.0 * std::f64::consts::PI * freq * t).sin() * (0.6 + 0.4 * (12.0 * t).sin()))
                as f32
        });
        Waveform::new(arr).unwrap()
    }

    #[test]
    fn denoise_preserves_shape_and_downsamples_time_by_eight() {
        let cfg = tiny_cfg();
        let mut rng = crate::core::seeded_rng(7);
        let vae = VaeModel::<f32>::new(cfg, &mut rng);
        for frames in [48usize, 51] {
            let spec = Array2::from_shape_fn((80, frames), |(m, t)| {
                ((m * 7 + t * 3) % 13) as f32 * 0.1 - 0.6
            });
            let (_, _, lt) = vae.latent_dims(80, frames);
            assert_eq!(lt, frames.div_ceil(8), "time downsampling factor is 8");
            let out = vae_denoise(&vae, &spec, &mut crate::core::seeded_rng(1));
            assert_eq!(out.dim(), spec.dim());
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn kl_vanishes_when_the_posterior_matches_the_prior() {
        let cfg = tiny_cfg();
        let mut rng = crate::core::seeded_rng(3);
        let mut vae = VaeModel::<f32>::new(cfg, &mut rng);
        // Zero the posterior-mean head so mu == 0 with logvar == 0.
        let values: Vec<ArrayD<f32>> = vae
            .params()
            .into_iter()
            .map(|(name, p)| {
                if name.starts_with("enc_mu") {
                    ArrayD::zeros(p.raw_dim())
                } else {
                    p.to_owned()
                }
            })
            .collect();
        vae.assign(values);

        let x = Tensor::from_array(ArrayD::zeros(IxDyn(&[1, 1, 80, 48])));
        let (lc, lm, lt) = vae.latent_dims(80, 48);
        let eps = ArrayD::zeros(IxDyn(&[1, lc, lm, lt]));
        let mut tape = Tape::new();
        let batch = vae.elbo_loss(&x, &x, &eps, &mut tape);
        assert_eq!(batch.kl, 0.0);
    }

    #[test]
    fn denoising_training_raises_the_elbo_and_keeps_kl_nonnegative() {
        let waves: Vec<Waveform> = (0..16)
            .map(|i| tone(250.0 + 400.0 * (i % 4) as f64, 0.5, 0.2 + 0.05 * (i / 4) as f32))
            .collect();
        let extractor = LogMelExtractor::<f32>::default();
        let tc = VaeTrainConfig {
            epochs: 20,
            batch_size: 2,
            lr: 3e-3,
            noise_sigma: 0.05,
        };
        let rngf = RngFactory::new(99);
        let (vae, report) = train_vae(&tiny_cfg(), &tc, &waves, &extractor, &rngf).unwrap();
        assert!(report.min_kl >= 0.0, "KL must stay nonnegative, got {}", report.min_kl);
        assert!(
            report.epoch_elbos.last().unwrap() > report.epoch_elbos.first().unwrap(),
            "ELBO should rise: {:?}",
            report.epoch_elbos
        );

        // The trained denoiser should reconstruct clean inputs more
        // faithfully than noise-corrupted ones.
        let mut clean_err = 0.0;
        let mut noisy_err = 0.0;
        let mut noise_rng = crate::core::seeded_rng(5);
        for w in &waves {
            let spec = extractor.log_mel_value(w.samples()).unwrap();
            let corrupted = crate::model::train::add_gaussian(w, 0.1, &mut noise_rng);
            let spec_noisy = extractor.log_mel_value(corrupted.samples()).unwrap();
            let rc = vae_denoise(&vae, &spec, &mut crate::core::seeded_rng(11));
            let rn = vae_denoise(&vae, &spec_noisy, &mut crate::core::seeded_rng(11));
            clean_err += (&rc - &spec).mapv(|v| (v as f64).powi(2)).sum();
            noisy_err += (&rn - &spec).mapv(|v| (v as f64).powi(2)).sum();
        }
        assert!(
            clean_err < noisy_err,
            "clean recon {clean_err:.1} should beat noisy recon {noisy_err:.1}"
        );
    }

    #[test]
    fn denoise_is_seed_deterministic_and_differentiable() {
        let cfg = tiny_cfg();
        let mut rng = crate::core::seeded_rng(21);
        let vae = VaeModel::<f32>::new(cfg, &mut rng);
        let spec = ArrayD::from_shape_simple_fn(IxDyn(&[80, 48]), {
            let mut s = 0.0f32;
            move || {
                s += 0.37;
                (s.sin() - 0.5) * 2.0
            }
        });

        let x = Tensor::param(spec.clone().into_shared());
        let a = vae.denoise_tensor(&x, &mut crate::core::seeded_rng(4)).sum_all();
        let b = vae.denoise_tensor(&x, &mut crate::core::seeded_rng(4)).sum_all();
        assert_eq!(a.item(), b.item(), "same seed must reproduce the draw");

        let g = grad_of(&a, &x);
        assert!(g.iter().any(|v| *v != 0.0), "gradient must reach the input");
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
