//! Score calibration by linear logistic regression.
//!
//! Verification scores are mapped to log-likelihood-ratio scale by an
//! affine transform `a*s + b` fitted on bonafide trials. Classes are
//! weighted to an effective prior of one half, so the fit reflects the
//! score distributions rather than the trial-count imbalance. The
//! objective is convex; a damped Newton iteration on the two
//! parameters converges in a handful of steps.

use serde::{Deserialize, Serialize};

use crate::error::AdvoxError;
use crate::Result;

/// Fitted affine score map to log-likelihood-ratio scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Calibration {
    pub fn apply(&self, score: f64) -> f64 {
        self.a * score + self.b
    }

    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }
}

/// Pulls the slope gently toward one and the offset toward zero. Keeps
/// the optimum finite when the two score lists are linearly separable
/// (otherwise the likelihood keeps improving as the slope grows) while
/// perturbing well-conditioned fits far less than their sampling noise.
const RIDGE: f64 = 1e-6;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Balanced negative log-likelihood plus the ridge term.
fn objective(a: f64, b: f64, targets: &[f64], nontargets: &[f64]) -> f64 {
    let wt = 0.5 / targets.len() as f64;
    let wn = 0.5 / nontargets.len() as f64;
    let mut j = 0.0;
    for &s in targets {
        j += wt * softplus(-(a * s + b));
    }
    for &s in nontargets {
        j += wn * softplus(a * s + b);
    }
    j + 0.5 * RIDGE * ((a - 1.0) * (a - 1.0) + b * b)
}

/// Gradient and Hessian of the objective at `(a, b)`.
fn derivatives(
    a: f64,
    b: f64,
    targets: &[f64],
    nontargets: &[f64],
) -> ([f64; 2], [[f64; 2]; 2]) {
    let wt = 0.5 / targets.len() as f64;
    let wn = 0.5 / nontargets.len() as f64;
    let mut ga = 0.0;
    let mut gb = 0.0;
    let mut haa = 0.0;
    let mut hab = 0.0;
    let mut hbb = 0.0;
    for &s in targets {
        let p = sigmoid(a * s + b);
        ga -= wt * s * (1.0 - p);
        gb -= wt * (1.0 - p);
        let w = wt * p * (1.0 - p);
        haa += w * s * s;
        hab += w * s;
        hbb += w;
    }
    for &s in nontargets {
        let p = sigmoid(a * s + b);
        ga += wn * s * p;
        gb += wn * p;
        let w = wn * p * (1.0 - p);
        haa += w * s * s;
        hab += w * s;
        hbb += w;
    }
    ga += RIDGE * (a - 1.0);
    gb += RIDGE * b;
    haa += RIDGE;
    hbb += RIDGE;
    ([ga, gb], [[haa, hab], [hab, hbb]])
}

/// Fits the log-likelihood-ratio map on bonafide trial scores.
///
/// Returns an error when either side is empty or the fitted slope is
/// not positive (the score lists carry no same-direction speaker
/// evidence, so no monotone calibration exists).
pub fn calibrate(targets: &[f64], nontargets: &[f64]) -> Result<Calibration> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(AdvoxError::Eval(
            "calibration needs both target and nontarget trials".into(),
        ));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(AdvoxError::Eval("calibration scores must be finite".into()));
    }

    let mut a = 1.0;
    let mut b = 0.0;
    let mut j = objective(a, b, targets, nontargets);
    for _ in 0..200 {
        let (g, h) = derivatives(a, b, targets, nontargets);
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        if det <= 0.0 {
            break;
        }
        let da = -(h[1][1] * g[0] - h[0][1] * g[1]) / det;
        let db = -(h[0][0] * g[1] - h[0][1] * g[0]) / det;
        // Backtrack until the convex objective actually decreases.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let (na, nb) = (a + step * da, b + step * db);
            let nj = objective(na, nb, targets, nontargets);
            if nj <= j {
                if (j - nj).abs() < 1e-14 && da.abs() * step < 1e-10 && db.abs() * step < 1e-10 {
                    return finish(na, nb);
                }
                a = na;
                b = nb;
                j = nj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    finish(a, b)
}

fn finish(a: f64, b: f64) -> Result<Calibration> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(AdvoxError::Eval("calibration diverged".into()));
    }
    if a <= 0.0 {
        return Err(AdvoxError::Eval(format!(
            "calibration slope {a:.4} is not positive; target scores do not \
             rank above nontarget scores"
        )));
    }
    Ok(Calibration { a, b })
}
