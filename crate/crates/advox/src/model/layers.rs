//! Parameterized layers over the autodiff engine.
//!
//! Layers hold their weights as shared storage. Each forward call wraps
//! the storage in graph leaves; when a tape is supplied the leaves are
//! differentiable and recorded in traversal order, which must match the
//! parameter enumeration order of the owning model.

use crate::autograd::{conv1d, conv2d, ConvSpec, Real, Storage, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Records differentiable parameter leaves during a forward pass.
#[derive(Default)]
pub struct Tape<F: Real> {
    pub leaves: Vec<Tensor<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { leaves: Vec::new() }
    }
}

/// Wrap a parameter for a forward pass, recording it when training.
pub fn leaf<F: Real>(storage: &Storage<F>, tape: Option<&mut Tape<F>>) -> Tensor<F> {
    match tape {
        Some(t) => {
            let l = Tensor::param(storage.clone());
            t.leaves.push(l.clone());
            l
        }
        None => Tensor::constant(storage.clone()),
    }
}

/// Kaiming-uniform initialization for a weight of the given fan-in.
pub fn kaiming<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Storage<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64c(rng.gen_range(-bound..bound)))
        .into_shared()
}

pub fn zeros<F: Real>(shape: &[usize]) -> Storage<F> {
    ArrayD::zeros(IxDyn(shape)).into_shared()
}

/// 2-d convolution with bias.
pub struct Conv2dLayer<F: Real> {
    pub w: Storage<F>,
    pub b: Storage<F>,
    pub spec: ConvSpec,
}

impl<F: Real> Conv2dLayer<F> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2dLayer {
            w: kaiming(&[c_out, c_in, k, k], c_in * k * k, rng),
            b: zeros(&[1, c_out, 1, 1]),
            spec,
        }
    }

    pub fn apply(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let w = leaf(&self.w, tape.as_deref_mut());
        let b = leaf(&self.b, tape);
        &conv2d(x, &w, self.spec) + &b
    }
}

/// 1-d convolution with bias.
pub struct Conv1dLayer<F: Real> {
    pub w: Storage<F>,
    pub b: Storage<F>,
    pub spec: ConvSpec,
}

impl<F: Real> Conv1dLayer<F> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv1dLayer {
            w: kaiming(&[c_out, c_in, k], c_in * k, rng),
            b: zeros(&[1, c_out, 1]),
            spec,
        }
    }

    pub fn apply(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let w = leaf(&self.w, tape.as_deref_mut());
        let b = leaf(&self.b, tape);
        &conv1d(x, &w, self.spec) + &b
    }
}

/// Fully connected layer `y = x W^T + b` over `[batch, in]` inputs.
pub struct DenseLayer<F: Real> {
    pub w: Storage<F>, // [out, in]
    pub b: Storage<F>, // [out]
}

impl<F: Real> DenseLayer<F> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer {
            w: kaiming(&[d_out, d_in], d_in, rng),
            b: zeros(&[d_out]),
        }
    }

    pub fn apply(&self, x: &Tensor<F>, mut tape: Option<&mut Tape<F>>) -> Tensor<F> {
        let w = leaf(&self.w, tape.as_deref_mut());
        let b = leaf(&self.b, tape);
        &x.matmul(&w.permute(&[1, 0])) + &b.reshape(&[1, self.w.shape()[0]])
    }
}

/// Mean plus standard deviation over the time axis of `[b, c, t]`,
/// giving `[b, 2c]`.
pub fn stats_pool<F: Real>(h: &Tensor<F>) -> Tensor<F> {
    assert_eq!(h.shape().len(), 3, "stats_pool expects [b, c, t]");
    let mean = h.mean_axes(&[2], false); // [b, c]
    let sq_mean = (h * h).mean_axes(&[2], false);
    let var = (&sq_mean - &(&mean * &mean)).max_scalar(F::zero());
    let std = var.add_scalar(F::from_f64c(1e-8)).sqrt();
    crate::autograd::concat(&[mean, std], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::seeded_rng;
    use ndarray::IxDyn;

    #[test]
    fn stats_pool_is_invariant_to_frame_duplication() {
        let mut rng = seeded_rng(3);
        let h0: ArrayD<f32> =
            ArrayD::from_shape_simple_fn(IxDyn(&[2, 4, 9]), || rng.gen_range(-1.0..1.0));
        let h = Tensor::from_array(h0.clone());
        let doubled = crate::autograd::concat(&[h.clone(), h.clone()], 2);
        let a = stats_pool(&h).to_array();
        let b = stats_pool(&doubled).to_array();
        let max_diff = (&a - &b).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
        assert!(max_diff < 1e-6, "pooling changed under duplication: {max_diff}");
    }

    #[test]
    fn dense_matches_manual_affine() {
        let mut rng = seeded_rng(4);
        let layer = DenseLayer::<f64>::new(3, 2, &mut rng);
        let x = Tensor::from_array(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, -2.0, 0.5]).unwrap(),
        );
        let y = layer.apply(&x, None).to_array();
        for o in 0..2 {
            let mut expect = layer.b[IxDyn(&[o])];
            for i in 0..3 {
                expect += layer.w[IxDyn(&[o, i])] * x.data()[IxDyn(&[0, i])];
            }
            assert!((y[IxDyn(&[0, o])] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_records_leaves_in_apply_order() {
        let mut rng = seeded_rng(5);
        let conv = Conv2dLayer::<f32>::new(1, 2, 3, ConvSpec::plain(1, 1), &mut rng);
        let dense = DenseLayer::<f32>::new(8, 2, &mut rng);
        let mut tape = Tape::new();
        let x = Tensor::from_array(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
        let h = conv.apply(&x, Some(&mut tape));
        let flat = h.reshape(&[1, 8]);
        let _ = dense.apply(&flat, Some(&mut tape));
        assert_eq!(tape.leaves.len(), 4);
        assert_eq!(tape.leaves[0].shape(), &[2, 1, 3, 3]);
        assert_eq!(tape.leaves[2].shape(), &[2, 8]);
    }
}
