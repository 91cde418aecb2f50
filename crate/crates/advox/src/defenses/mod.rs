//! Pre-processing defenses and their composition with the classifier.
//!
//! A [`DefenseChain`] runs ordered stages in front of a classifier:
//! waveform-domain stages (noise smoothing, vocoder re-synthesis)
//! first, then spectrogram-domain stages (manifold projection,
//! variational denoising) on the log-mel representation, then the
//! per-band mean normalization the classifier was trained with. The
//! chain is itself an attack target, so every attack in the toolkit
//! can be pointed at a defended model unchanged; the threat mode
//! decides whether gradients flow exactly through every stage or
//! treat each defense as identity in the backward pass.

mod checkpoint;
pub mod gan;
pub mod vae;
pub mod vocoder;

pub use checkpoint::{VAE_KIND, VOCODER_KIND, WGAN_KIND};

pub use gan::{
    cut_patches, defense_gan_project, defense_gan_project_counted, train_wgan, GanConfig,
    GanCritic, GanGenerator, GanProjection, WganReport, WganTrainConfig,
};
pub use vae::{train_vae, vae_denoise, VaeConfig, VaeModel, VaeTrainConfig, VaeTrainReport};
pub use vocoder::{
    train_vocoder, vocoder_reconstruct, VocoderConfig, VocoderModel, VocoderTrainConfig,
    VocoderTrainReport,
};

use crate::attacks::{margin_or_ce, AttackTarget};
use crate::autograd::{grad, Real, Tensor};
use crate::core::{GradientRequest, ThreatMode, Waveform};
use crate::dsp::LogMelExtractor;
use crate::error::AdvoxError;
use crate::model::{train::add_gaussian, XVectorClassifier};
use crate::Result;
use ndarray::{Array1, ArrayD, Ix1, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Where a smoothing stage sits relative to the defense it wraps, for
/// declarative configs that pair it with another stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingPlacement {
    BeforeStage,
    AfterStage,
}

/// Gaussian-noise smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Noise standard deviation in waveform amplitude units.
    pub sigma: f64,
    /// Votes in [`smooth_predict`]; a chain stage always draws once.
    pub n_samples: usize,
    pub placement: SmoothingPlacement,
}

impl SmoothingConfig {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma >= 0.0, "noise sigma must be nonnegative");
        SmoothingConfig {
            sigma,
            n_samples: 1,
            placement: SmoothingPlacement::BeforeStage,
        }
    }
}

/// Majority-vote prediction over noisy copies of the input; ties
/// resolve to the lowest class index. With the default single sample
/// this is exactly the base prediction on one noisy draw, and with
/// `sigma = 0` it is the base prediction on the input itself.
pub fn smooth_predict(
    target: &dyn AttackTarget,
    x: &Waveform,
    cfg: &SmoothingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    assert!(cfg.sigma >= 0.0, "noise sigma must be nonnegative");
    assert!(cfg.n_samples >= 1, "at least one vote");
    let mut votes = vec![0usize; target.n_classes()];
    for _ in 0..cfg.n_samples {
        let noisy = add_gaussian(x, cfg.sigma, rng);
        votes[target.predict(&noisy, rng)?] += 1;
    }
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One pre-processing stage. Waveform-domain stages must precede
/// spectrogram-domain stages in a chain.
pub enum DefenseStage<F: Real> {
    /// Additive Gaussian noise on the waveform, redrawn per call.
    Smoothing(SmoothingConfig),
    /// Re-synthesis of the waveform from its log-mel representation.
    Vocoder(Arc<VocoderModel<F>>),
    /// Block-wise projection onto a generator manifold plus blending.
    /// The latent argmin has no usable gradient, so this stage is
    /// forward-only and legal under identity substitution only.
    DefenseGan {
        generator: Arc<GanGenerator<F>>,
        projection: GanProjection,
    },
    /// Variational denoising of the spectrogram.
    Vae(Arc<VaeModel<F>>),
}

impl<F: Real> DefenseStage<F> {
    pub fn is_spectral(&self) -> bool {
        matches!(self, DefenseStage::DefenseGan { .. } | DefenseStage::Vae(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseStage::Smoothing(_) => "smoothing",
            DefenseStage::Vocoder(_) => "vocoder",
            DefenseStage::DefenseGan { .. } => "defense_gan",
            DefenseStage::Vae(_) => "vae",
        }
    }
}

/// An ordered defense pipeline in front of a classifier, with a fixed
/// gradient semantics for attacks.
pub struct DefenseChain<'a, F: Real> {
    stages: Vec<DefenseStage<F>>,
    model: &'a XVectorClassifier<F>,
    extractor: &'a LogMelExtractor<F>,
    pub mode: ThreatMode,
}

impl<'a, F: Real> DefenseChain<'a, F> {
    /// Validates stage ordering and mode legality up front, so a bad
    /// composition fails at build time rather than mid-attack.
    pub fn new(
        stages: Vec<DefenseStage<F>>,
        model: &'a XVectorClassifier<F>,
        extractor: &'a LogMelExtractor<F>,
        mode: ThreatMode,
    ) -> Result<Self> {
        let mut seen_spectral = false;
        for s in &stages {
            if s.is_spectral() {
                seen_spectral = true;
            } else if seen_spectral {
                return Err(AdvoxError::DefenseChain(format!(
                    "waveform-domain stage '{}' placed after a spectrogram-domain stage",
                    s.name()
                )));
            }
            match s {
                DefenseStage::Smoothing(c) if c.sigma < 0.0 => {
                    return Err(AdvoxError::DefenseChain(
                        "smoothing sigma must be nonnegative".into(),
                    ));
                }
                DefenseStage::DefenseGan { generator, .. } => {
                    if mode == ThreatMode::WhiteboxE2ed {
                        return Err(AdvoxError::DefenseChain(
                            "manifold projection has no usable end-to-end gradient; \
                             use identity-substitution mode"
                                .into(),
                        ));
                    }
                    if extractor.cfg.n_mels != gan::PATCH {
                        return Err(AdvoxError::DefenseChain(format!(
                            "manifold projection expects {} mel bands, extractor has {}",
                            gan::PATCH,
                            extractor.cfg.n_mels
                        )));
                    }
                    let _ = generator;
                }
                _ => {}
            }
        }
        Ok(DefenseChain { stages, model, extractor, mode })
    }

    pub fn stages(&self) -> &[DefenseStage<F>] {
        &self.stages
    }

    /// Stage list as a short id for reports, e.g. `smoothing+vae`.
    pub fn describe(&self) -> String {
        if self.stages.is_empty() {
            "none".to_string()
        } else {
            self.stages.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
        }
    }

    fn apply_wave(
        &self,
        stage: &DefenseStage<F>,
        wave: Tensor<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<F>> {
        match stage {
            DefenseStage::Smoothing(c) => {
                if c.sigma == 0.0 {
                    return Ok(wave);
                }
                let n = wave.shape()[0];
                let normal = Normal::new(0.0, c.sigma).unwrap();
                let noise = ArrayD::from_shape_simple_fn(IxDyn(&[n]), || {
                    F::from_f64c(normal.sample(rng))
                });
                Ok(&wave + &Tensor::constant(noise.into_shared()))
            }
            DefenseStage::Vocoder(voc) => {
                let n = wave.shape()[0];
                let z = Tensor::from_array(vocoder::draw_latent::<F>(n, rng));
                let synth = voc.forward_tensor(&wave, &z)?;
                // Keep the waveform length: synthesis covers whole hops
                // only, the missing tail stays silent.
                Ok(synth.pad_into(&[0], &[n]))
            }
            _ => unreachable!("spectral stage routed to the waveform leg"),
        }
    }

    fn apply_spec(
        &self,
        stage: &DefenseStage<F>,
        spec: Tensor<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<F>> {
        match stage {
            DefenseStage::Vae(vae) => Ok(vae.denoise_tensor(&spec, rng)),
            DefenseStage::DefenseGan { generator, projection } => {
                let vals = spec
                    .to_array()
                    .into_dimensionality::<Ix2>()
                    .expect("2-d spectrogram");
                let projected = defense_gan_project(generator, &vals, projection, rng);
                Ok(Tensor::constant(projected.into_dyn().into_shared()))
            }
            _ => unreachable!("waveform stage routed to the spectral leg"),
        }
    }

    /// Per-band mean normalization plus the classifier's scaled cosine
    /// head, `[1, n_classes]`.
    fn head(&self, spec: &Tensor<F>) -> Tensor<F> {
        let normed = spec - &spec.mean_axes(&[1], true);
        let (m, t) = (normed.shape()[0], normed.shape()[1]);
        let cos = self.model.cosines(&normed.reshape(&[1, m, t]), None);
        cos.scale(F::from_f64c(self.model.cfg.aam_scale))
    }

    /// Builds the stage pipeline graph, returning the input node, the
    /// value after the waveform stages, and the value after the
    /// spectrogram stages. Callers attach `head` where logits are
    /// needed.
    fn forward_graph(
        &self,
        x: &Array1<F>,
        differentiable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
        let storage = x.clone().into_dyn().into_shared();
        let xt = if differentiable {
            Tensor::param(storage)
        } else {
            Tensor::constant(storage)
        };
        let split = self
            .stages
            .iter()
            .position(|s| s.is_spectral())
            .unwrap_or(self.stages.len());
        let mut wave = xt.clone();
        for s in &self.stages[..split] {
            wave = self.apply_wave(s, wave, rng)?;
        }
        let mut spec = self.extractor.log_mel_unnormalized(&wave)?;
        for s in &self.stages[split..] {
            spec = self.apply_spec(s, spec, rng)?;
        }
        Ok((xt, wave, spec))
    }

    /// Defended logits; stochastic stages draw from the stream.
    pub fn forward_logits(&self, x: &Array1<F>, rng: &mut ChaCha8Rng) -> Result<Array1<F>> {
        let (_, _, spec) = self.forward_graph(x, false, rng)?;
        let logits = self.head(&spec);
        Ok(logits
            .to_array()
            .into_dimensionality::<Ix2>()
            .expect("logit row")
            .row(0)
            .to_owned())
    }

    /// Defended speaker embedding: the stage pipeline, per-band mean
    /// normalization, then the encoder without the cosine head. This is
    /// the representation verification trials score against.
    pub fn defended_embedding(&self, x: &Array1<F>, rng: &mut ChaCha8Rng) -> Result<Array1<F>> {
        let (_, _, spec) = self.forward_graph(x, false, rng)?;
        let normed = &spec - &spec.mean_axes(&[1], true);
        let (m, t) = (normed.shape()[0], normed.shape()[1]);
        let emb = self.model.embed_features(&normed.reshape(&[1, m, t]), None);
        Ok(emb
            .to_array()
            .into_dimensionality::<Ix2>()
            .expect("embedding row")
            .row(0)
            .to_owned())
    }

    /// Loss and waveform gradient under the chain's threat mode. Stage
    /// noise is drawn once per call and held constant for the gradient,
    /// so one call corresponds to one attack iteration.
    pub fn loss_and_grad(
        &self,
        x: &Array1<F>,
        req: &GradientRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<(F, Array1<F>)> {
        match self.mode {
            ThreatMode::WhiteboxE2ed => {
                let (xt, _, spec) = self.forward_graph(x, true, rng)?;
                let logits = self.head(&spec);
                let loss = margin_or_ce(&logits, req);
                let g = grad(&loss, &[&xt], None).remove(0);
                Ok((
                    loss.item(),
                    g.to_array().into_dimensionality::<Ix1>().expect("waveform gradient"),
                ))
            }
            ThreatMode::WhiteboxBpda => {
                // Forward through the true stages, then backpropagate
                // the differentiable suffix at the defended values and
                // bridge it through the feature extraction, treating
                // every defense stage as identity.
                let (_, wave_end, spec_end) = self.forward_graph(x, false, rng)?;
                let sp = Tensor::param(spec_end.to_array().into_shared());
                let logits = self.head(&sp);
                let loss = margin_or_ce(&logits, req);
                let gs = grad(&loss, &[&sp], None).remove(0);

                let wt = Tensor::param(wave_end.to_array().into_shared());
                let lm = self.extractor.log_mel_unnormalized(&wt)?;
                let gw = grad(&lm, &[&wt], Some(gs)).remove(0);
                Ok((
                    loss.item(),
                    gw.to_array().into_dimensionality::<Ix1>().expect("waveform gradient"),
                ))
            }
        }
    }
}

impl AttackTarget for DefenseChain<'_, f32> {
    fn n_classes(&self) -> usize {
        self.model.cfg.n_classes
    }

    fn logits(&self, x: &Waveform, rng: &mut ChaCha8Rng) -> Result<Array1<f32>> {
        self.forward_logits(x.samples(), rng)
    }

    fn loss_grad(
        &self,
        x: &Waveform,
        req: &GradientRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f32, Array1<f32>)> {
        self.loss_and_grad(x.samples(), req, rng)
    }
}
