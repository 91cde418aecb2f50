//! Adam optimizer over shared-storage parameters.

use crate::autograd::{Real, Storage};
use ndarray::ArrayD;

pub struct Adam<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: F::from_f64c(lr),
            beta1: F::from_f64c(0.9),
            beta2: F::from_f64c(0.999),
            eps: F::from_f64c(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `params` and `grads` must stay in one fixed order
    /// across steps. Indices in `frozen` are skipped but keep their
    /// moment slots, so freezing is stable mid-run.
    pub fn step(
        &mut self,
        params: &[Storage<F>],
        grads: &[ArrayD<F>],
        frozen: &[bool],
    ) -> Vec<ArrayD<F>> {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed mid-run");
        self.t += 1;
        let b1t = F::one() - self.beta1.powi(self.t);
        let b2t = F::one() - self.beta2.powi(self.t);
        let one = F::one();
        params
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (p, g))| {
                if frozen.get(i).copied().unwrap_or(false) {
                    return p.to_owned();
                }
                assert_eq!(p.shape(), g.shape(), "grad shape mismatch at param {i}");
                self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (one - self.beta1) * gv);
                self.v[i]
                    .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (one - self.beta2) * gv * gv);
                let mut out = p.to_owned();
                ndarray::Zip::from(&mut out)
                    .and(&self.m[i])
                    .and(&self.v[i])
                    .for_each(|w, &m, &v| {
                        let mhat = m / b1t;
                        let vhat = v / b2t;
                        *w = *w - self.lr * mhat / (vhat.sqrt() + self.eps);
                    });
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // min (x - 3)^2, gradient 2(x - 3).
        let mut adam = Adam::<f64>::new(0.1);
        let mut x = ArrayD::from_elem(IxDyn(&[1]), 0.0).into_shared();
        for _ in 0..200 {
            let g = x.mapv(|v| 2.0 * (v - 3.0));
            let updated = adam.step(&[x.clone()], &[g], &[false]);
            x = updated.into_iter().next().unwrap().into_shared();
        }
        assert!((x[IxDyn(&[0])] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut adam = Adam::<f64>::new(0.5);
        let x = ArrayD::from_elem(IxDyn(&[2]), 1.0).into_shared();
        let g = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        let out = adam.step(&[x.clone()], &[g], &[true]);
        assert_eq!(out[0], x.to_owned());
    }
}
