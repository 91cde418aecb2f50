//! Gradient attacks on waveform classifiers.
//!
//! Every attack consumes its victim through [`AttackTarget`], which
//! hides whether the waveform feeds a bare classifier or a defended
//! chain; the chain decides how gradients flow (exact or identity
//! substitution). Budgeted attacks guarantee the realized perturbation
//! norm never exceeds the budget; the minimum-norm attack reports the
//! norm it achieved instead.

mod carlini;
mod gradient;
mod universal;

pub use carlini::cw_l2;
pub use gradient::{bim, fgsm, pgd};
pub use universal::{universal_perturbation, UniversalResult};

use crate::core::{GradientRequest, NormOrder, SpeakerLabel, Waveform};
use crate::dsp::LogMelExtractor;
use crate::model::XVectorClassifier;
use crate::{AdvoxError, Result};
use ndarray::{Array1, Ix1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A classifier (possibly wrapped in defenses) as seen by an attacker.
///
/// Calls take a seeded stream because stochastic defenses draw noise
/// per forward pass; deterministic targets simply ignore it.
pub trait AttackTarget: Sync {
    fn n_classes(&self) -> usize;

    /// Raw logits for one waveform.
    fn logits(&self, x: &Waveform, rng: &mut ChaCha8Rng) -> Result<Array1<f32>>;

    /// Loss value and its gradient with respect to the waveform.
    fn loss_grad(
        &self,
        x: &Waveform,
        req: &GradientRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f32, Array1<f32>)>;

    /// Hard decision; ties resolve to the lowest class index.
    fn predict(&self, x: &Waveform, rng: &mut ChaCha8Rng) -> Result<usize> {
        let z = self.logits(x, rng)?;
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// The undefended classifier exposed as an attack target.
pub struct BareTarget<'a> {
    model: &'a XVectorClassifier<f32>,
    extractor: &'a LogMelExtractor<f32>,
}

impl<'a> BareTarget<'a> {
    pub fn new(model: &'a XVectorClassifier<f32>, extractor: &'a LogMelExtractor<f32>) -> Self {
        BareTarget { model, extractor }
    }

    fn forward(&self, x: &Waveform, differentiable: bool) -> Result<(crate::autograd::Tensor<f32>, crate::autograd::Tensor<f32>)> {
        use crate::autograd::Tensor;
        let storage = x.samples().clone().into_dyn().into_shared();
        let xt = if differentiable { Tensor::param(storage) } else { Tensor::constant(storage) };
        let feats = self.extractor.extract(&xt)?; // [m, t]
        let (m, t) = (feats.shape()[0], feats.shape()[1]);
        let cos = self.model.cosines(&feats.reshape(&[1, m, t]), None);
        let z = cos.scale(self.model.cfg.aam_scale as f32);
        Ok((xt, z))
    }
}

impl AttackTarget for BareTarget<'_> {
    fn n_classes(&self) -> usize {
        self.model.cfg.n_classes
    }

    fn logits(&self, x: &Waveform, _rng: &mut ChaCha8Rng) -> Result<Array1<f32>> {
        let (_, z) = self.forward(x, false)?;
        Ok(z.to_array().into_dimensionality::<ndarray::Ix2>().unwrap().row(0).to_owned())
    }

    fn loss_grad(
        &self,
        x: &Waveform,
        req: &GradientRequest,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(f32, Array1<f32>)> {
        let (xt, z) = self.forward(x, true)?;
        let loss = margin_or_ce(&z, req);
        let g = crate::autograd::grad(&loss, &[&xt], None).remove(0);
        Ok((
            loss.item(),
            g.to_array().into_dimensionality::<Ix1>().expect("waveform gradient is 1-d"),
        ))
    }
}

/// Build the requested loss node over a `[1, n_classes]` logit tensor.
///
/// The margin's competitor class is chosen from the current values and
/// held constant, so the margin is differentiable almost everywhere.
pub(crate) fn margin_or_ce<F: crate::autograd::Real>(
    z: &crate::autograd::Tensor<F>,
    req: &GradientRequest,
) -> crate::autograd::Tensor<F> {
    use crate::core::LossKind;
    let y = req.label.index();
    match req.loss {
        LossKind::CrossEntropy => crate::autograd::cross_entropy(z, &[y]),
        LossKind::CwMargin { kappa } => {
            let row = z.data();
            let n = row.shape()[1];
            let mut j_star = if y == 0 { 1 } else { 0 };
            for j in 0..n {
                if j != y && row[[0, j]] > row[[0, j_star]] {
                    j_star = j;
                }
            }
            let zy = z.select_rows(&[y]);
            let zj = z.select_rows(&[j_star]);
            (&zy - &zj)
                .add_scalar(F::from_f64c(kappa as f64))
                .max_scalar(F::zero())
                .sum_all()
        }
    }
}

/// Attack family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackAlgorithm {
    Fgsm,
    Bim,
    Pgd,
    CwL2,
    Universal,
}

/// Minimum-norm attack parameters: margin confidence, Adam step size,
/// descent steps per constant, and halving/doubling rounds on the
/// trade-off constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwParams {
    pub kappa: f32,
    pub lr: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub initial_const: f32,
    pub const_bounds: (f32, f32),
}

impl Default for CwParams {
    fn default() -> Self {
        CwParams {
            kappa: 0.0,
            lr: 0.001,
            inner_iters: 10,
            outer_iters: 5,
            initial_const: 1.0,
            const_bounds: (1e-3, 1e3),
        }
    }
}

impl CwParams {
    /// Longer schedule for contexts where the 5-round default is too
    /// coarse.
    pub fn extended() -> Self {
        CwParams { outer_iters: 10, ..CwParams::default() }
    }
}

/// Everything an attack run needs besides the victim and the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub algorithm: AttackAlgorithm,
    pub norm: NormOrder,
    pub eps: f32,
    /// Step size; `None` resolves to `eps / 5`.
    pub alpha: Option<f32>,
    pub iterations: usize,
    /// Extra random-start passes for projected descent; the zero-start
    /// pass always runs.
    pub restarts: usize,
    pub cw: CwParams,
}

impl AttackConfig {
    pub fn fgsm(eps: f32) -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::Fgsm,
            norm: NormOrder::LInf,
            eps,
            alpha: None,
            iterations: 1,
            restarts: 0,
            cw: CwParams::default(),
        }
    }

    pub fn bim(eps: f32, alpha: f32, iterations: usize) -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::Bim,
            norm: NormOrder::LInf,
            eps,
            alpha: Some(alpha),
            iterations,
            restarts: 0,
            cw: CwParams::default(),
        }
    }

    pub fn pgd(norm: NormOrder, eps: f32, alpha: f32, iterations: usize, restarts: usize) -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::Pgd,
            norm,
            eps,
            alpha: Some(alpha),
            iterations,
            restarts,
            cw: CwParams::default(),
        }
    }

    pub fn cw(cw: CwParams) -> Self {
        AttackConfig {
            algorithm: AttackAlgorithm::CwL2,
            norm: NormOrder::L2,
            eps: 0.0,
            alpha: None,
            iterations: cw.inner_iters,
            restarts: 0,
            cw,
        }
    }

    /// Step size with the `eps / 5` default applied.
    pub fn step(&self) -> f32 {
        self.alpha.unwrap_or(self.eps / 5.0)
    }

    /// Compact cell id for report rows, e.g. `bim7_eps0.01`.
    pub fn cell_id(&self) -> String {
        match self.algorithm {
            AttackAlgorithm::Fgsm => format!("fgsm_eps{}", self.eps),
            AttackAlgorithm::Bim => format!("bim{}_eps{}", self.iterations, self.eps),
            AttackAlgorithm::Pgd => format!(
                "pgd{}_{}_eps{}_r{}",
                self.iterations,
                self.norm.tag(),
                self.eps,
                self.restarts
            ),
            AttackAlgorithm::CwL2 => format!("cw_l2_k{}", self.cw.kappa),
            AttackAlgorithm::Universal => {
                format!("universal_{}_eps{}", self.norm.tag(), self.eps)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eps.is_finite() || self.eps < 0.0 {
            return Err(AdvoxError::AttackConfig(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.eps
            )));
        }
        if self.iterations > 0 && self.algorithm != AttackAlgorithm::Fgsm {
            let a = self.step();
            if !(a > 0.0) && self.eps > 0.0 {
                return Err(AdvoxError::AttackConfig(format!(
                    "step size must be positive when iterating, got {a}"
                )));
            }
        }
        let (lo, hi) = self.cw.const_bounds;
        if !(lo > 0.0 && hi >= lo) {
            return Err(AdvoxError::AttackConfig(format!(
                "bad trade-off constant bounds [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Outcome of one attack on one utterance.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Waveform,
    pub perturbation: crate::core::AdversarialPerturbation,
    /// Fresh-forward decision differs from the benign label.
    pub success: bool,
    pub realized_l2: f32,
    pub realized_linf: f32,
    /// Gradient evaluations spent.
    pub iterations_used: usize,
}

/// Assemble a result from a raw additive delta: clamp into amplitude
/// range, re-derive the effective delta, measure it, and verify success
/// with a fresh forward pass.
pub(crate) fn finish_attack(
    target: &dyn AttackTarget,
    x: &Waveform,
    y: SpeakerLabel,
    delta: Array1<f32>,
    norm: NormOrder,
    budget: Option<f32>,
    iterations_used: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    let adversarial = Waveform::from_clamped(x.samples() + &delta)?;
    let effective = adversarial.samples() - x.samples();
    let realized_l2 = crate::core::l2_norm(effective.view());
    let realized_linf = crate::core::linf_norm(effective.view());
    let success = target.predict(&adversarial, rng)? != y.index();
    Ok(AttackResult {
        adversarial,
        perturbation: crate::core::AdversarialPerturbation {
            delta: effective,
            norm_order: norm,
            budget,
        },
        success,
        realized_l2,
        realized_linf,
        iterations_used,
    })
}

/// Dispatch a per-utterance attack by config. Universal perturbations
/// are dataset-level and have their own entry point.
pub fn run_attack(
    target: &dyn AttackTarget,
    x: &Waveform,
    y: SpeakerLabel,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    match cfg.algorithm {
        AttackAlgorithm::Fgsm => fgsm(target, x, y, cfg, rng),
        AttackAlgorithm::Bim => bim(target, x, y, cfg, rng),
        AttackAlgorithm::Pgd => pgd(target, x, y, cfg, rng),
        AttackAlgorithm::CwL2 => cw_l2(target, x, y, cfg, rng),
        AttackAlgorithm::Universal => Err(AdvoxError::AttackConfig(
            "universal perturbations run over a dataset; use universal_perturbation".into(),
        )),
    }
}

/// Fixed affine logits over short waveforms. Gradients are closed-form,
/// which makes this the oracle target for attack-mechanics tests and
/// the boundary-distance check.
pub struct LinearTarget {
    /// `[n_classes, dim]`.
    pub w: ndarray::Array2<f32>,
    pub b: Array1<f32>,
}

impl LinearTarget {
    pub fn new(w: ndarray::Array2<f32>, b: Array1<f32>) -> Self {
        assert_eq!(w.shape()[0], b.len());
        LinearTarget { w, b }
    }

    /// Exact L2 distance from `x` to the decision boundary between
    /// classes `a` and `b` (positive when `a` currently wins).
    pub fn boundary_distance(&self, x: &Waveform, a: usize, c: usize) -> f32 {
        let dw = &self.w.row(a) - &self.w.row(c);
        let margin = dw.dot(x.samples()) + self.b[a] - self.b[c];
        margin / crate::core::l2_norm(dw.view())
    }
}

impl AttackTarget for LinearTarget {
    fn n_classes(&self) -> usize {
        self.b.len()
    }

    fn logits(&self, x: &Waveform, _rng: &mut ChaCha8Rng) -> Result<Array1<f32>> {
        Ok(self.w.dot(x.samples()) + &self.b)
    }

    fn loss_grad(
        &self,
        x: &Waveform,
        req: &GradientRequest,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f32, Array1<f32>)> {
        use crate::core::LossKind;
        let z = self.logits(x, rng)?;
        let y = req.label.index();
        match req.loss {
            LossKind::CrossEntropy => {
                let zmax = z.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
                let ez = z.mapv(|v| (v - zmax).exp());
                let p = &ez / ez.sum();
                let loss = -(p[y].max(1e-38)).ln();
                let mut coeff = p;
                coeff[y] -= 1.0;
                Ok((loss, self.w.t().dot(&coeff)))
            }
            LossKind::CwMargin { kappa } => {
                let mut j_star = if y == 0 { 1 } else { 0 };
                for j in 0..z.len() {
                    if j != y && z[j] > z[j_star] {
                        j_star = j;
                    }
                }
                let f = (z[y] - z[j_star] + kappa).max(0.0);
                let g = if f > 0.0 {
                    (&self.w.row(y) - &self.w.row(j_star)).to_owned()
                } else {
                    Array1::zeros(x.len())
                };
                Ok((f, g))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{seeded_rng, LossKind};
    use ndarray::array;

    #[test]
    fn linear_target_cross_entropy_gradient_matches_finite_differences() {
        let w = array![[0.3f32, -0.8, 0.1], [-0.5, 0.2, 0.7]];
        let b = array![0.05f32, -0.1];
        let target = LinearTarget::new(w, b);
        let x = Waveform::new(array![0.1f32, -0.2, 0.3]).unwrap();
        let req = GradientRequest { loss: LossKind::CrossEntropy, label: SpeakerLabel(0) };
        let mut rng = seeded_rng(0);
        let (_, g) = target.loss_grad(&x, &req, &mut rng).unwrap();
        let h = 1e-3f32;
        for i in 0..3 {
            let mut plus = x.samples().clone();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = target
                .loss_grad(&Waveform::new(plus).unwrap(), &req, &mut rng)
                .unwrap()
                .0;
            let lm = target
                .loss_grad(&Waveform::new(minus).unwrap(), &req, &mut rng)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-3, "coord {i}: fd {fd} vs analytic {}", g[i]);
        }
    }

    #[test]
    fn run_attack_rejects_universal_and_bad_config() {
        let target = LinearTarget::new(array![[1.0f32, 0.0], [0.0, 1.0]], array![0.0f32, 0.0]);
        let x = Waveform::new(array![0.5f32, 0.0]).unwrap();
        let mut rng = seeded_rng(1);
        let cfg = AttackConfig {
            algorithm: AttackAlgorithm::Universal,
            ..AttackConfig::fgsm(0.1)
        };
        assert!(run_attack(&target, &x, SpeakerLabel(0), &cfg, &mut rng).is_err());
        let bad = AttackConfig { eps: -1.0, ..AttackConfig::fgsm(0.1) };
        assert!(bad.validate().is_err());
    }
}
