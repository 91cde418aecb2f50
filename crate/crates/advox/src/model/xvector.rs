//! Reduced-scale x-vector speaker classifier.
//!
//! A stack of strided 2-d convolutions over log-mel features, mean plus
//! standard-deviation pooling over time, a dense embedding layer, and an
//! angular-margin classification head that scores by cosine similarity
//! between the normalized embedding and per-speaker weight rows.

use super::layers::{kaiming, leaf, stats_pool, Conv2dLayer, Tape};
use crate::autograd::{ConvSpec, Real, Storage, Tensor};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XVectorConfig {
    pub n_mels: usize,
    /// Channel widths of the encoder stages; the first stage keeps
    /// resolution, each later stage halves both axes.
    pub encoder_channels: Vec<usize>,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// Additive angular margin applied during training.
    pub aam_margin: f64,
    /// Logit scale applied to cosines.
    pub aam_scale: f64,
}

impl Default for XVectorConfig {
    fn default() -> Self {
        XVectorConfig {
            n_mels: 80,
            encoder_channels: vec![8, 16, 32, 64],
            embed_dim: 128,
            n_classes: 40,
            aam_margin: 0.3,
            aam_scale: 30.0,
        }
    }
}

impl XVectorConfig {
    /// Frequency bins left after the encoder's strided stages.
    pub fn pooled_freq(&self) -> usize {
        let halvings = self.encoder_channels.len() - 1;
        assert!(
            self.n_mels % (1 << halvings) == 0,
            "n_mels must be divisible by 2^{halvings}"
        );
        self.n_mels >> halvings
    }

    fn frame_dim(&self) -> usize {
        self.pooled_freq() * self.encoder_channels.last().unwrap()
    }
}

/// The classifier. Generic over the float type so the same architecture
/// serves f32 production runs and f64 gradient oracles.
pub struct XVectorClassifier<F: Real> {
    pub cfg: XVectorConfig,
    pub convs: Vec<Conv2dLayer<F>>,
    pub embed: super::layers::DenseLayer<F>,
    /// Per-class weight rows `[n_classes, embed_dim]`, cosine-normalized
    /// at scoring time. No bias: the head is purely angular.
    pub class_w: Storage<F>,
}

impl<F: Real> XVectorClassifier<F> {
    pub fn new(cfg: XVectorConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.encoder_channels.len() >= 2);
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in cfg.encoder_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2dLayer::new(c_in, c_out, 3, ConvSpec::plain(stride, 1), rng));
            c_in = c_out;
        }
        let embed = super::layers::DenseLayer::new(2 * cfg.frame_dim(), cfg.embed_dim, rng);
        let class_w = kaiming(&[cfg.n_classes, cfg.embed_dim], cfg.embed_dim, rng);
        XVectorClassifier { cfg, convs, embed, class_w }
    }

    /// Embeddings `[b, embed_dim]` from features `[b, n_mels, t]`.
    pub fn embed_features(&self, feats: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        assert_eq!(feats.shape().len(), 3, "expected [b, n_mels, t] features");
        let (b, n_mels, t) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
        assert_eq!(n_mels, self.cfg.n_mels);
        let mut h = feats.reshape(&[b, 1, n_mels, t]);
        for conv in &self.convs {
            h = conv.apply(&h, tape.as_deref_mut()).relu();
        }
        let (c, fq, tq) = (h.shape()[1], h.shape()[2], h.shape()[3]);
        let frames = h.reshape(&[b, c * fq, tq]);
        let pooled = stats_pool(&frames); // [b, 2*c*fq]
        self.embed.apply(&pooled, tape)
    }

    /// Cosine similarities `[b, n_classes]` between normalized
    /// embeddings and normalized class rows.
    pub fn cosines(&self, feats: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let emb = self.embed_features(feats, tape.as_deref_mut());
        let w = leaf(&self.class_w, tape);
        cosine_of(&emb, &w)
    }

    /// Inference logits: scaled cosines, no margin.
    pub fn logits(&self, feats: &Tensor<F>) -> Tensor<F> {
        self.cosines(feats, None).scale(F::from_f64c(self.cfg.aam_scale))
    }

    /// Hard predictions for a feature batch; ties resolve to the lowest
    /// class index.
    pub fn predict(&self, feats: &Tensor<F>) -> Vec<usize> {
        let cos = self
            .cosines(feats, None)
            .to_array()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("cosine table is 2-d");
        cos.axis_iter(Axis(0)).map(argmax).collect()
    }

    /// Canonical parameter order, shared by tapes, the optimizer, and
    /// checkpoints.
    pub fn params(&self) -> Vec<(String, Storage<F>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("encoder.{i}.w"), c.w.clone()));
            out.push((format!("encoder.{i}.b"), c.b.clone()));
        }
        out.push(("embed.w".into(), self.embed.w.clone()));
        out.push(("embed.b".into(), self.embed.b.clone()));
        out.push(("head.w".into(), self.class_w.clone()));
        out
    }

    /// Replace every parameter; order must match [`params`].
    pub fn assign(&mut self, values: Vec<ArrayD<F>>) {
        assert_eq!(values.len(), self.convs.len() * 2 + 3);
        let mut it = values.into_iter();
        for c in &mut self.convs {
            c.w = it.next().unwrap().into_shared();
            c.b = it.next().unwrap().into_shared();
        }
        self.embed.w = it.next().unwrap().into_shared();
        self.embed.b = it.next().unwrap().into_shared();
        self.class_w = it.next().unwrap().into_shared();
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Cast every parameter to another float type.
    pub fn cast<G: Real>(&self) -> XVectorClassifier<G> {
        let mut rng = crate::core::seeded_rng(0);
        let mut out = XVectorClassifier::<G>::new(self.cfg.clone(), &mut rng);
        let values: Vec<ArrayD<G>> = self
            .params()
            .into_iter()
            .map(|(_, p)| p.mapv(|v| G::from_f64c(v.to_f64().unwrap())).into_dyn())
            .collect();
        out.assign(values);
        out
    }
}

/// Row-normalized cosine table between `emb [b, d]` and `w [c, d]`.
fn cosine_of<F: Real>(emb: &Tensor<F>, w: &Tensor<F>) -> Tensor<F> {
    let eps = F::from_f64c(1e-12);
    let en = &(emb * emb).sum_axes(&[1], true).add_scalar(eps).sqrt();
    let wn = &(w * w).sum_axes(&[1], true).add_scalar(eps).sqrt();
    let e = &(emb / en);
    let wt = &(w / wn).permute(&[1, 0]);
    e.matmul(wt)
}

pub(crate) fn argmax<F: Real>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Additive angular-margin softmax loss over cosine scores.
///
/// For the true class, `cos(theta)` becomes `cos(theta + m)`; where
/// `cos(theta) <= cos(pi - m)` the margin would wrap past pi, so the
/// monotone surrogate `cos(theta) - m sin(m)` is used instead. All
/// scores are then scaled and fed to cross-entropy. With `m = 0` this is
/// exactly scaled cross-entropy over cosines.
pub fn aam_softmax_loss<F: Real>(
    cos: &Tensor<F>,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> Tensor<F> {
    let (b, c) = (cos.shape()[0], cos.shape()[1]);
    assert_eq!(labels.len(), b);
    let m = F::from_f64c(margin);
    let (cos_m, sin_m) = (m.cos(), m.sin());
    let s = F::from_f64c(scale);

    let cos_y = cos.select_rows(labels); // [b]
    let sin_y = (&Tensor::scalar(F::one()) - &(&cos_y * &cos_y))
        .max_scalar(F::from_f64c(1e-12))
        .sqrt();
    let phi = &cos_y.scale(cos_m) - &sin_y.scale(sin_m);

    // Past-pi fallback mask, constant by construction.
    let threshold = F::from_f64c(std::f64::consts::PI - margin).cos();
    let mask = cos_y
        .data()
        .mapv(|v| if v <= threshold { F::one() } else { F::zero() });
    let mask = Tensor::from_array(mask.to_owned());
    let fallback = cos_y.add_scalar(-(m * sin_m));
    let one = Tensor::scalar(F::one());
    let phi = &(&mask * &fallback) + &(&(&one - &mask) * &phi);

    let bump = (&phi - &cos_y).scale(s).scatter_rows(labels, c); // [b, c]
    let logits = &cos.scale(s) + &bump;
    crate::autograd::cross_entropy(&logits, labels)
}

/// Features for a whole batch of equal-length waveforms, stacked to
/// `[b, n_mels, t]` values.
pub fn batch_features<F: Real>(
    extractor: &crate::dsp::LogMelExtractor<F>,
    waves: &[Array1<F>],
) -> crate::Result<Array2<F>>
where
{
    assert!(!waves.is_empty());
    let mut rows: Vec<ndarray::Array2<F>> = Vec::with_capacity(waves.len());
    for w in waves {
        rows.push(extractor.extract_value(w)?);
    }
    let (m, t) = (rows[0].shape()[0], rows[0].shape()[1]);
    let mut flat = Array2::<F>::zeros((waves.len(), m * t));
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.shape(), &[m, t], "waveforms must share one length per batch");
        flat.row_mut(i).assign(
            &r.view()
                .into_shape_with_order(m * t)
                .unwrap(),
        );
    }
    Ok(flat)
}

/// Reshape stacked features back to a `[b, n_mels, t]` tensor.
pub fn features_tensor<F: Real>(flat: &Array2<F>, n_mels: usize) -> Tensor<F> {
    let (b, mt) = (flat.shape()[0], flat.shape()[1]);
    let t = mt / n_mels;
    Tensor::from_array(
        flat.clone()
            .into_shape_with_order(IxDyn(&[b, n_mels, t]))
            .unwrap(),
    )
}
