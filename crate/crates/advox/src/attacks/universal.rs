//! Input-agnostic perturbation: accumulate per-sample escapes and keep
//! the running delta projected onto the budget ball.

use super::AttackTarget;
use crate::core::{
    project_lp_ball, AdversarialPerturbation, GradientRequest, LossKind, NormOrder, SpeakerLabel,
    Waveform,
};
use crate::Result;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Outcome of a universal-perturbation search.
#[derive(Debug, Clone)]
pub struct UniversalResult {
    pub perturbation: AdversarialPerturbation,
    /// Fraction of the working set whose decision the delta flips.
    pub fooled_fraction: f64,
    pub epochs_used: usize,
    /// Whether the target fool rate was reached before the epoch cap.
    pub attained: bool,
}

fn fooled_fraction(
    target: &dyn AttackTarget,
    xs: &[Waveform],
    clean: &[usize],
    delta: &Array1<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut fooled = 0usize;
    for (x, &c) in xs.iter().zip(clean) {
        let xd = Waveform::from_clamped(x.samples() + delta)?;
        if target.predict(&xd, rng)? != c {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / xs.len() as f64)
}

/// Short escape search around one sample: sign-gradient ascent on
/// cross-entropy against the clean decision, retried with a growing
/// radius until the decision flips or the radius budget is spent.
fn escape_step(
    target: &dyn AttackTarget,
    x_shifted: &Waveform,
    clean_label: usize,
    norm: NormOrder,
    eps: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Array1<f32>>> {
    let req = GradientRequest { loss: LossKind::CrossEntropy, label: SpeakerLabel(clean_label) };
    for denom in [8.0f32, 4.0, 2.0, 1.0] {
        let radius = eps / denom;
        let alpha = radius * 0.4;
        let mut r = Array1::<f32>::zeros(x_shifted.len());
        for _ in 0..5 {
            let xa = Waveform::from_clamped(x_shifted.samples() + &r)?;
            let (_, g) = target.loss_grad(&xa, &req, rng)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            match norm {
                NormOrder::LInf => {
                    ndarray::Zip::from(&mut r).and(&g).for_each(|ri, &gi| {
                        *ri += alpha * if gi > 0.0 { 1.0 } else if gi < 0.0 { -1.0 } else { 0.0 };
                    });
                }
                NormOrder::L2 => {
                    let n = crate::core::l2_norm(g.view()).max(1e-12);
                    ndarray::Zip::from(&mut r).and(&g).for_each(|ri, &gi| {
                        *ri += alpha * gi / n;
                    });
                }
            }
            project_lp_ball(r.view_mut(), norm, radius)?;
            let xa = Waveform::from_clamped(x_shifted.samples() + &r)?;
            if target.predict(&xa, rng)? != clean_label {
                return Ok(Some(r));
            }
        }
    }
    Ok(None)
}

/// Search for a single delta that flips the model's decision on at
/// least `target_fool_rate` of the working set. The delta stays inside
/// the `eps` ball at all times; falling short of the rate within
/// `max_epochs` is a reported outcome, not an error.
pub fn universal_perturbation(
    target: &dyn AttackTarget,
    xs: &[Waveform],
    norm: NormOrder,
    eps: f32,
    target_fool_rate: f64,
    max_epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<UniversalResult> {
    assert!(!xs.is_empty(), "universal perturbation needs a working set");
    assert!(
        target_fool_rate > 0.0 && target_fool_rate <= 1.0,
        "fool rate must be in (0, 1]"
    );
    let len = xs[0].len();
    assert!(
        xs.iter().all(|x| x.len() == len),
        "working set must share one waveform length"
    );

    let mut clean = Vec::with_capacity(xs.len());
    for x in xs {
        clean.push(target.predict(x, rng)?);
    }

    let mut delta = Array1::<f32>::zeros(len);
    let mut rate = fooled_fraction(target, xs, &clean, &delta, rng)?;
    let mut epochs_used = 0;

    while rate < target_fool_rate && epochs_used < max_epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(rng);
        for i in order {
            let xd = Waveform::from_clamped(xs[i].samples() + &delta)?;
            if target.predict(&xd, rng)? != clean[i] {
                continue;
            }
            if let Some(r) = escape_step(target, &xd, clean[i], norm, eps, rng)? {
                delta += &r;
                project_lp_ball(delta.view_mut(), norm, eps)?;
            }
        }
        epochs_used += 1;
        rate = fooled_fraction(target, xs, &clean, &delta, rng)?;
    }

    Ok(UniversalResult {
        perturbation: AdversarialPerturbation { delta, norm_order: norm, budget: Some(eps) },
        fooled_fraction: rate,
        epochs_used,
        attained: rate >= target_fool_rate,
    })
}
