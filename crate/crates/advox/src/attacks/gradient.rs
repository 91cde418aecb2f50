//! Budgeted gradient attacks: single-step sign, iterative clipped
//! sign, and projected descent with random restarts.

use super::{finish_attack, AttackConfig, AttackResult, AttackTarget};
use crate::core::{
    project_lp_ball, GradientRequest, LossKind, NormOrder, SpeakerLabel, Waveform,
};
use crate::{AdvoxError, Result};
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn sign(g: &Array1<f32>) -> Array1<f32> {
    g.mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn check_finite(g: &Array1<f32>) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(AdvoxError::Divergence("non-finite attack gradient".into()));
    }
    Ok(())
}

/// Keep `x + delta` inside amplitude range by folding the clamp back
/// into the delta.
fn clamp_into_range(x: &Waveform, delta: &mut Array1<f32>) {
    ndarray::Zip::from(delta).and(x.samples()).for_each(|d, &s| {
        *d = (s + *d).clamp(-1.0, 1.0) - s;
    });
}

fn random_in_ball(len: usize, norm: NormOrder, eps: f32, rng: &mut ChaCha8Rng) -> Array1<f32> {
    match norm {
        NormOrder::LInf => Array1::from_shape_fn(len, |_| rng.gen_range(-eps..=eps)),
        NormOrder::L2 => {
            let mut d = Array1::from_shape_fn(len, |_| {
                let v: f32 = StandardNormal.sample(rng);
                v
            });
            let n = crate::core::l2_norm(d.view()).max(1e-12);
            let u: f32 = rng.gen::<f32>().powf(1.0 / len as f32);
            d.mapv_inplace(|v| v / n * eps * u);
            d
        }
    }
}

/// One descent pass from a given starting delta; every iterate stays in
/// the budget ball and in amplitude range. Returns the final delta and
/// the number of gradient evaluations.
fn descent_pass(
    target: &dyn AttackTarget,
    x: &Waveform,
    req: &GradientRequest,
    norm: NormOrder,
    eps: f32,
    alpha: f32,
    iters: usize,
    mut delta: Array1<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array1<f32>, usize)> {
    clamp_into_range(x, &mut delta);
    let mut evals = 0;
    for _ in 0..iters {
        let x_adv = Waveform::from_clamped(x.samples() + &delta)?;
        let (_, g) = target.loss_grad(&x_adv, req, rng)?;
        evals += 1;
        check_finite(&g)?;
        match norm {
            NormOrder::LInf => delta = delta + sign(&g).mapv(|v| v * alpha),
            NormOrder::L2 => {
                let n = crate::core::l2_norm(g.view()).max(1e-12);
                delta = delta + g.mapv(|v| v / n * alpha);
            }
        }
        project_lp_ball(delta.view_mut(), norm, eps)?;
        clamp_into_range(x, &mut delta);
    }
    Ok((delta, evals))
}

/// Single full-budget step in the gradient sign direction.
pub fn fgsm(
    target: &dyn AttackTarget,
    x: &Waveform,
    y: SpeakerLabel,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return finish_attack(target, x, y, Array1::zeros(x.len()), NormOrder::LInf, Some(0.0), 0, rng);
    }
    let req = GradientRequest { loss: LossKind::CrossEntropy, label: y };
    let (_, g) = target.loss_grad(x, &req, rng)?;
    check_finite(&g)?;
    let delta = sign(&g).mapv(|v| v * cfg.eps);
    finish_attack(target, x, y, delta, NormOrder::LInf, Some(cfg.eps), 1, rng)
}

/// Iterative sign attack, clipped to the sup-norm budget after every
/// step.
pub fn bim(
    target: &dyn AttackTarget,
    x: &Waveform,
    y: SpeakerLabel,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return finish_attack(target, x, y, Array1::zeros(x.len()), NormOrder::LInf, Some(0.0), 0, rng);
    }
    let req = GradientRequest { loss: LossKind::CrossEntropy, label: y };
    let (delta, evals) = descent_pass(
        target,
        x,
        &req,
        NormOrder::LInf,
        cfg.eps,
        cfg.step(),
        cfg.iterations,
        Array1::zeros(x.len()),
        rng,
    )?;
    finish_attack(target, x, y, delta, NormOrder::LInf, Some(cfg.eps), evals, rng)
}

/// Projected gradient descent under either norm. The zero-start pass
/// always runs; `restarts` adds passes initialized uniformly in the
/// budget ball, and the pass with the highest final loss wins.
pub fn pgd(
    target: &dyn AttackTarget,
    x: &Waveform,
    y: SpeakerLabel,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackResult> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return finish_attack(target, x, y, Array1::zeros(x.len()), cfg.norm, Some(0.0), 0, rng);
    }
    let req = GradientRequest { loss: LossKind::CrossEntropy, label: y };
    let passes = 1 + cfg.restarts;
    let mut evals = 0;
    let mut best: Option<(f32, Array1<f32>)> = None;
    for pass in 0..passes {
        let init = if pass == 0 {
            Array1::zeros(x.len())
        } else {
            random_in_ball(x.len(), cfg.norm, cfg.eps, rng)
        };
        let (delta, used) = descent_pass(
            target,
            x,
            &req,
            cfg.norm,
            cfg.eps,
            cfg.step(),
            cfg.iterations,
            init,
            rng,
        )?;
        evals += used;
        if passes == 1 {
            best = Some((0.0, delta));
            break;
        }
        let x_adv = Waveform::from_clamped(x.samples() + &delta)?;
        let (final_loss, _) = target.loss_grad(&x_adv, &req, rng)?;
        evals += 1;
        if best.as_ref().map_or(true, |(l, _)| final_loss > *l) {
            best = Some((final_loss, delta));
        }
    }
    let (_, delta) = best.expect("at least one pass ran");
    finish_attack(target, x, y, delta, cfg.norm, Some(cfg.eps), evals, rng)
}
