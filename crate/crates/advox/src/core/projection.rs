//! Norm computation and Euclidean projection onto Lp balls.

use crate::autograd::Real;
use crate::{AdvoxError, Result};
use ndarray::{ArrayViewD, ArrayViewMut1, ArrayView1};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Supported perturbation norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    L2,
    LInf,
}

impl NormOrder {
    /// Lowercase tag used in config labels and report cell ids.
    pub fn tag(self) -> &'static str {
        match self {
            NormOrder::L2 => "l2",
            NormOrder::LInf => "linf",
        }
    }

    /// Parse a numeric order; only 2 and infinity are supported.
    pub fn try_from_f64(p: f64) -> Result<Self> {
        if p == 2.0 {
            Ok(NormOrder::L2)
        } else if p.is_infinite() && p > 0.0 {
            Ok(NormOrder::LInf)
        } else {
            Err(AdvoxError::NormOrder(format!("p = {p}")))
        }
    }
}

impl FromStr for NormOrder {
    type Err = AdvoxError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" | "infinity" => Ok(NormOrder::LInf),
            other => Err(AdvoxError::NormOrder(other.to_string())),
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormOrder::L2 => write!(f, "l2"),
            NormOrder::LInf => write!(f, "linf"),
        }
    }
}

pub fn l2_norm(v: ArrayView1<f32>) -> f32 {
    v.fold(0.0f64, |acc, &x| acc + (x as f64) * (x as f64)).sqrt() as f32
}

pub fn linf_norm(v: ArrayView1<f32>) -> f32 {
    v.fold(0.0f32, |acc, &x| acc.max(x.abs()))
}

/// Generic norm over any-dimensional data, used by graph-level checks.
pub fn norm_of<F: Real>(v: &ArrayViewD<F>, order: NormOrder) -> F {
    match order {
        NormOrder::L2 => v.fold(F::zero(), |acc, &x| acc + x * x).sqrt(),
        NormOrder::LInf => v.fold(F::zero(), |acc, &x| acc.max(x.abs())),
    }
}

/// Project `delta` onto the closed `eps`-ball of the given norm.
///
/// Idempotent, and the result's norm never exceeds `eps + 1e-6`. A
/// negative or non-finite radius is rejected.
pub fn project_lp_ball(mut delta: ArrayViewMut1<f32>, order: NormOrder, eps: f32) -> Result<()> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(AdvoxError::AttackConfig(format!(
            "projection radius must be finite and non-negative, got {eps}"
        )));
    }
    match order {
        NormOrder::LInf => {
            delta.mapv_inplace(|x| x.clamp(-eps, eps));
        }
        NormOrder::L2 => {
            let norm = l2_norm(delta.view());
            if norm > eps {
                // Shrink a hair under the radius so the rescaled norm
                // stays below eps in f32 and a second projection is an
                // exact no-op.
                let scale = if norm > 0.0 { (eps / norm) * (1.0 - 1e-6) } else { 0.0 };
                delta.mapv_inplace(|x| x * scale);
            }
        }
    }
    Ok(())
}
