//! Minimum-L2 margin attack with a halving/doubling search over the
//! distance-vs-margin trade-off constant.

use super::{finish_attack, AttackConfig, AttackResult, AttackTarget};
use crate::core::{GradientRequest, LossKind, NormOrder, SpeakerLabel, Waveform};
use crate::model::Adam;
use crate::Result;
use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

/// Minimize `||delta||_2^2 + c * margin(x + delta)` with Adam, doubling
/// `c` after a failed round and halving it after a successful one. The
/// returned candidate is the successful delta of minimum realized L2,
/// or the failure with the smallest remaining margin.
///
/// The box constraint is enforced by clamping at application time; the
/// descent treats that clamp as identity, and the reported delta is
/// re-derived from the clamped waveform so the result is always a valid
/// perturbation.
pub fn cw_l2(
    target: &dyn AttackTarget,
    x: &Waveform,
    y: SpeakerLabel,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    let p = cfg.cw;
    let req = GradientRequest { loss: LossKind::CwMargin { kappa: p.kappa }, label: y };
    let (c_lo, c_hi) = p.const_bounds;
    let mut c = p.initial_const.clamp(c_lo, c_hi);

    let mut delta = Array1::<f32>::zeros(x.len());
    let mut best_success: Option<(Array1<f32>, f32)> = None; // (delta, l2)
    let mut best_failure: Option<(Array1<f32>, f32)> = None; // (delta, margin)
    let mut evals = 0;

    let consider = |delta: &Array1<f32>,
                        margin: f32,
                        best_success: &mut Option<(Array1<f32>, f32)>,
                        best_failure: &mut Option<(Array1<f32>, f32)>| {
        if margin <= 0.0 {
            let l2 = crate::core::l2_norm(delta.view());
            if best_success.as_ref().map_or(true, |(_, b)| l2 < *b) {
                *best_success = Some((delta.clone(), l2));
            }
        } else if best_failure.as_ref().map_or(true, |(_, b)| margin < *b) {
            *best_failure = Some((delta.clone(), margin));
        }
    };

    for _outer in 0..p.outer_iters {
        let mut adam = Adam::<f32>::new(p.lr);
        let mut round_succeeded = false;
        for _inner in 0..p.inner_iters {
            let x_adv = Waveform::from_clamped(x.samples() + &delta)?;
            let effective = x_adv.samples() - x.samples();
            let (margin, g_margin) = target.loss_grad(&x_adv, &req, rng)?;
            evals += 1;
            consider(&effective, margin, &mut best_success, &mut best_failure);
            round_succeeded |= margin <= 0.0;

            let obj_grad = delta.mapv(|d| 2.0 * d) + g_margin.mapv(|v| v * c);
            let updated = adam.step(
                &[delta.clone().into_dyn().into_shared()],
                &[obj_grad.into_dyn()],
                &[false],
            );
            delta = updated
                .into_iter()
                .next()
                .unwrap()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("delta is 1-d");
        }
        // Score the round's final iterate too.
        let x_adv = Waveform::from_clamped(x.samples() + &delta)?;
        let effective = x_adv.samples() - x.samples();
        let (margin, _) = target.loss_grad(&x_adv, &req, rng)?;
        evals += 1;
        consider(&effective, margin, &mut best_success, &mut best_failure);
        round_succeeded |= margin <= 0.0;

        if round_succeeded {
            c = (c / 2.0).max(c_lo);
            // Refine from the best success found so far.
            if let Some((d, _)) = &best_success {
                delta = d.clone();
            }
        } else {
            c = (c * 2.0).min(c_hi);
        }
    }

    let chosen = match (&best_success, &best_failure) {
        (Some((d, _)), _) => d.clone(),
        (None, Some((d, _))) => d.clone(),
        (None, None) => delta,
    };
    finish_attack(target, x, y, chosen, NormOrder::L2, None, evals, rng)
}
