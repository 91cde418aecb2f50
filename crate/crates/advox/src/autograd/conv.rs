//! 1-d and 2-d convolutions via im2col plus matmul.
//!
//! Each family is a closed trio: `conv*` (forward), `conv*_igrad`
//! (gradient to the input, also usable as a transposed convolution), and
//! `conv*_wgrad` (gradient to the weights). Every member's backward rule
//! is built from the other two, so convolution graphs are differentiable
//! to arbitrary order.

use super::{Real, Tensor};
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Ix3, Ix4};

/// Stride, symmetric zero padding, and dilation, applied to every
/// spatial dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        assert!(stride > 0 && dilation > 0);
        ConvSpec { stride, pad, dilation }
    }

    pub fn plain(stride: usize, pad: usize) -> Self {
        Self::new(stride, pad, 1)
    }

    /// Output length for an input of length `l` and kernel of size `k`.
    pub fn out_len(&self, l: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(
            l + 2 * self.pad >= span,
            "input length {l} too short for kernel {k} (dilation {})",
            self.dilation
        );
        (l + 2 * self.pad - span) / self.stride + 1
    }

    /// Minimal input length that yields `lo` outputs; the exact inverse
    /// when the forward stride evenly consumed the input.
    pub fn in_len(&self, lo: usize, k: usize) -> usize {
        (lo - 1) * self.stride + self.dilation * (k - 1) + 1 - 2 * self.pad
    }
}

// ---- 1-d kernels ----

fn im2col1d<F: Real>(x: &ArrayView3<F>, k: usize, spec: ConvSpec) -> Array3<F> {
    let (b, cin, l) = x.dim();
    let lo = spec.out_len(l, k);
    let mut cols = Array3::<F>::zeros((b, lo, cin * k));
    for bi in 0..b {
        for c in 0..cin {
            for ki in 0..k {
                let col = c * k + ki;
                for o in 0..lo {
                    let pos = o * spec.stride + ki * spec.dilation;
                    if pos >= spec.pad && pos - spec.pad < l {
                        cols[[bi, o, col]] = x[[bi, c, pos - spec.pad]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im1d<F: Real>(cols: &Array3<F>, cin: usize, l: usize, k: usize, spec: ConvSpec) -> Array3<F> {
    let (b, lo, _) = cols.dim();
    let mut x = Array3::<F>::zeros((b, cin, l));
    for bi in 0..b {
        for c in 0..cin {
            for ki in 0..k {
                let col = c * k + ki;
                for o in 0..lo {
                    let pos = o * spec.stride + ki * spec.dilation;
                    if pos >= spec.pad && pos - spec.pad < l {
                        x[[bi, c, pos - spec.pad]] += cols[[bi, o, col]];
                    }
                }
            }
        }
    }
    x
}

fn conv1d_value<F: Real>(x: &ArrayView3<F>, w: &ArrayView3<F>, spec: ConvSpec) -> Array3<F> {
    let (b, cin, l) = x.dim();
    let (cout, wcin, k) = w.dim();
    assert_eq!(cin, wcin, "conv1d channel mismatch");
    let lo = spec.out_len(l, k);
    let cols = im2col1d(x, k, spec);
    let wmat = w.to_shape((cout, cin * k)).unwrap();
    let mut y = Array3::<F>::zeros((b, cout, lo));
    for bi in 0..b {
        let cb = cols.index_axis(ndarray::Axis(0), bi);
        y.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&wmat.dot(&cb.t()));
    }
    y
}

fn conv1d_igrad_value<F: Real>(
    g: &ArrayView3<F>,
    w: &ArrayView3<F>,
    spec: ConvSpec,
    in_len: usize,
) -> Array3<F> {
    let (b, cout, lo) = g.dim();
    let (wcout, cin, k) = w.dim();
    assert_eq!(cout, wcout, "conv1d igrad channel mismatch");
    let wmat = w.to_shape((cout, cin * k)).unwrap();
    let mut cols = Array3::<F>::zeros((b, lo, cin * k));
    for bi in 0..b {
        let gb = g.index_axis(ndarray::Axis(0), bi);
        cols.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&gb.t().dot(&wmat));
    }
    col2im1d(&cols, cin, in_len, k, spec)
}

fn conv1d_wgrad_value<F: Real>(
    x: &ArrayView3<F>,
    g: &ArrayView3<F>,
    spec: ConvSpec,
    k: usize,
) -> Array3<F> {
    let (b, cin, _) = x.dim();
    let (_, cout, _) = g.dim();
    let cols = im2col1d(x, k, spec);
    let mut wmat = Array2::<F>::zeros((cout, cin * k));
    for bi in 0..b {
        let gb = g.index_axis(ndarray::Axis(0), bi);
        let cb = cols.index_axis(ndarray::Axis(0), bi);
        wmat = wmat + gb.dot(&cb);
    }
    wmat.into_shape_with_order((cout, cin, k)).unwrap().into_dyn()
        .into_dimensionality::<Ix3>()
        .unwrap()
}

fn as3<F: Real>(t: &Tensor<F>) -> ArrayView3<'_, F> {
    t.data().view().into_dimensionality::<Ix3>().expect("3-d tensor")
}

/// `x: [b, c_in, l]`, `w: [c_out, c_in, k]` -> `[b, c_out, l_out]`.
pub fn conv1d<F: Real>(x: &Tensor<F>, w: &Tensor<F>, spec: ConvSpec) -> Tensor<F> {
    let y = conv1d_value(&as3(x), &as3(w), spec);
    let (in_len, k) = (x.shape()[2], w.shape()[2]);
    Tensor::from_op(
        y.into_dyn(),
        vec![x.clone(), w.clone()],
        Box::new(move |g, parents, needs| {
            vec![
                needs[0].then(|| conv1d_igrad(g, &parents[1], spec, in_len)),
                needs[1].then(|| conv1d_wgrad(&parents[0], g, spec, k)),
            ]
        }),
    )
}

/// Gradient of [`conv1d`] to its input; doubles as a transposed
/// convolution of `g` by `w` producing length `in_len`.
pub fn conv1d_igrad<F: Real>(g: &Tensor<F>, w: &Tensor<F>, spec: ConvSpec, in_len: usize) -> Tensor<F> {
    let y = conv1d_igrad_value(&as3(g), &as3(w), spec, in_len);
    let k = w.shape()[2];
    Tensor::from_op(
        y.into_dyn(),
        vec![g.clone(), w.clone()],
        Box::new(move |h, parents, needs| {
            vec![
                needs[0].then(|| conv1d(h, &parents[1], spec)),
                needs[1].then(|| conv1d_wgrad(h, &parents[0], spec, k)),
            ]
        }),
    )
}

/// Gradient of [`conv1d`] to its weights.
pub fn conv1d_wgrad<F: Real>(x: &Tensor<F>, g: &Tensor<F>, spec: ConvSpec, k: usize) -> Tensor<F> {
    let y = conv1d_wgrad_value(&as3(x), &as3(g), spec, k);
    let in_len = x.shape()[2];
    Tensor::from_op(
        y.into_dyn(),
        vec![x.clone(), g.clone()],
        Box::new(move |s, parents, needs| {
            vec![
                needs[0].then(|| conv1d_igrad(&parents[1], s, spec, in_len)),
                needs[1].then(|| conv1d(&parents[0], s, spec)),
            ]
        }),
    )
}

// ---- 2-d kernels ----

fn im2col2d<F: Real>(x: &ArrayView4<F>, kh: usize, kw: usize, spec: ConvSpec) -> Array3<F> {
    let (b, cin, h, w) = x.dim();
    let ho = spec.out_len(h, kh);
    let wo = spec.out_len(w, kw);
    let mut cols = Array3::<F>::zeros((b, ho * wo, cin * kh * kw));
    for bi in 0..b {
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let col = (c * kh + ki) * kw + kj;
                    for oi in 0..ho {
                        let pi = oi * spec.stride + ki * spec.dilation;
                        if pi < spec.pad || pi - spec.pad >= h {
                            continue;
                        }
                        for oj in 0..wo {
                            let pj = oj * spec.stride + kj * spec.dilation;
                            if pj >= spec.pad && pj - spec.pad < w {
                                cols[[bi, oi * wo + oj, col]] =
                                    x[[bi, c, pi - spec.pad, pj - spec.pad]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im2d<F: Real>(
    cols: &Array3<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
) -> Array4<F> {
    let (b, _, _) = cols.dim();
    let ho = spec.out_len(h, kh);
    let wo = spec.out_len(w, kw);
    let mut x = Array4::<F>::zeros((b, cin, h, w));
    for bi in 0..b {
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let col = (c * kh + ki) * kw + kj;
                    for oi in 0..ho {
                        let pi = oi * spec.stride + ki * spec.dilation;
                        if pi < spec.pad || pi - spec.pad >= h {
                            continue;
                        }
                        for oj in 0..wo {
                            let pj = oj * spec.stride + kj * spec.dilation;
                            if pj >= spec.pad && pj - spec.pad < w {
                                x[[bi, c, pi - spec.pad, pj - spec.pad]] +=
                                    cols[[bi, oi * wo + oj, col]];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn as4<F: Real>(t: &Tensor<F>) -> ArrayView4<'_, F> {
    t.data().view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

fn conv2d_value<F: Real>(x: &ArrayView4<F>, w: &ArrayView4<F>, spec: ConvSpec) -> ArrayD<F> {
    let (b, cin, h, wd) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let ho = spec.out_len(h, kh);
    let wo = spec.out_len(wd, kw);
    let cols = im2col2d(x, kh, kw, spec);
    let wmat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut y = Array3::<F>::zeros((b, cout, ho * wo));
    for bi in 0..b {
        let cb = cols.index_axis(ndarray::Axis(0), bi);
        y.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&wmat.dot(&cb.t()));
    }
    y.into_shape_with_order((b, cout, ho, wo)).unwrap().into_dyn()
}

/// `x: [b, c_in, h, w]`, `w: [c_out, c_in, kh, kw]` -> `[b, c_out, h_out, w_out]`.
pub fn conv2d<F: Real>(x: &Tensor<F>, w: &Tensor<F>, spec: ConvSpec) -> Tensor<F> {
    let y = conv2d_value(&as4(x), &as4(w), spec);
    let in_hw = (x.shape()[2], x.shape()[3]);
    let k_hw = (w.shape()[2], w.shape()[3]);
    Tensor::from_op(
        y,
        vec![x.clone(), w.clone()],
        Box::new(move |g, parents, needs| {
            vec![
                needs[0].then(|| conv2d_igrad(g, &parents[1], spec, in_hw)),
                needs[1].then(|| conv2d_wgrad(&parents[0], g, spec, k_hw)),
            ]
        }),
    )
}

/// Gradient of [`conv2d`] to its input; doubles as a transposed
/// convolution producing spatial size `in_hw`.
pub fn conv2d_igrad<F: Real>(
    g: &Tensor<F>,
    w: &Tensor<F>,
    spec: ConvSpec,
    in_hw: (usize, usize),
) -> Tensor<F> {
    let gv = as4(g);
    let wv = as4(w);
    let (b, cout, ho, wo) = gv.dim();
    let (wcout, cin, kh, kw) = wv.dim();
    assert_eq!(cout, wcout, "conv2d igrad channel mismatch");
    let wmat = wv.to_shape((cout, cin * kh * kw)).unwrap();
    let mut cols = Array3::<F>::zeros((b, ho * wo, cin * kh * kw));
    for bi in 0..b {
        let gb = gv
            .index_axis(ndarray::Axis(0), bi)
            .to_shape((cout, ho * wo))
            .unwrap()
            .to_owned();
        cols.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&gb.t().dot(&wmat));
    }
    let y = col2im2d(&cols, cin, in_hw.0, in_hw.1, kh, kw, spec);
    let k_hw = (kh, kw);
    Tensor::from_op(
        y.into_dyn(),
        vec![g.clone(), w.clone()],
        Box::new(move |h, parents, needs| {
            vec![
                needs[0].then(|| conv2d(h, &parents[1], spec)),
                needs[1].then(|| conv2d_wgrad(h, &parents[0], spec, k_hw)),
            ]
        }),
    )
}

/// Gradient of [`conv2d`] to its weights.
pub fn conv2d_wgrad<F: Real>(
    x: &Tensor<F>,
    g: &Tensor<F>,
    spec: ConvSpec,
    k_hw: (usize, usize),
) -> Tensor<F> {
    let xv = as4(x);
    let gv = as4(g);
    let (b, cin, _, _) = xv.dim();
    let (_, cout, ho, wo) = gv.dim();
    let (kh, kw) = k_hw;
    let cols = im2col2d(&xv, kh, kw, spec);
    let mut wmat = Array2::<F>::zeros((cout, cin * kh * kw));
    for bi in 0..b {
        let gb = gv
            .index_axis(ndarray::Axis(0), bi)
            .to_shape((cout, ho * wo))
            .unwrap()
            .to_owned();
        let cb = cols.index_axis(ndarray::Axis(0), bi);
        wmat = wmat + gb.dot(&cb);
    }
    let y = wmat
        .into_shape_with_order((cout, cin, kh, kw))
        .unwrap()
        .into_dyn();
    let in_hw = (x.shape()[2], x.shape()[3]);
    Tensor::from_op(
        y,
        vec![x.clone(), g.clone()],
        Box::new(move |s, parents, needs| {
            vec![
                needs[0].then(|| conv2d_igrad(&parents[1], s, spec, in_hw)),
                needs[1].then(|| conv2d(&parents[0], s, spec)),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad, Tensor};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Naive direct conv1d used as an oracle.
    fn conv1d_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, spec: ConvSpec) -> ArrayD<f64> {
        let (b, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let lo = spec.out_len(l, k);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[b, cout, lo]));
        for bi in 0..b {
            for co in 0..cout {
                for o in 0..lo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ki in 0..k {
                            let pos = (o * spec.stride + ki * spec.dilation) as isize
                                - spec.pad as isize;
                            if pos >= 0 && (pos as usize) < l {
                                acc += x[[bi, c, pos as usize]] * w[[co, c, ki]];
                            }
                        }
                    }
                    y[[bi, co, o]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv1d_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in [
            ConvSpec::plain(1, 0),
            ConvSpec::plain(2, 1),
            ConvSpec::new(1, 2, 2),
            ConvSpec::new(3, 1, 1),
        ] {
            let x = randn(&[2, 3, 17], &mut rng);
            let w = randn(&[4, 3, 3], &mut rng);
            let y = conv1d(&Tensor::from_array(x.clone()), &Tensor::from_array(w.clone()), spec);
            let oracle = conv1d_naive(&x, &w, spec);
            let diff = (&y.to_array() - &oracle).mapv(f64::abs).sum();
            assert!(diff < 1e-12, "spec {spec:?} diff {diff}");
        }
    }

    #[test]
    fn conv1d_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new(2, 1, 2);
        let x0 = randn(&[1, 2, 15], &mut rng);
        let w0 = randn(&[3, 2, 3], &mut rng);
        let f = |x0: &ArrayD<f64>, w0: &ArrayD<f64>| -> f64 {
            let x = Tensor::from_array(x0.clone());
            let w = Tensor::from_array(w0.clone());
            let y = conv1d(&x, &w, spec);
            (&y * &y).sum_all().item()
        };
        let x = Tensor::param_from(x0.clone());
        let w = Tensor::param_from(w0.clone());
        let y = conv1d(&x, &w, spec);
        let loss = (&y * &y).sum_all();
        let gs = grad(&loss, &[&x, &w], None);
        let h = 1e-6;
        for (gi, (base, which)) in [(x0.clone(), 0usize), (w0.clone(), 1usize)].iter().enumerate() {
            let g = gs[gi].to_array();
            for i in 0..base.len().min(10) {
                let flat: Vec<usize> = {
                    let mut rem = i;
                    base.shape()
                        .iter()
                        .rev()
                        .map(|&d| {
                            let r = rem % d;
                            rem /= d;
                            r
                        })
                        .collect::<Vec<_>>()
                        .into_iter()
                        .rev()
                        .collect()
                };
                let mut p = base.clone();
                p[IxDyn(&flat)] += h;
                let mut m = base.clone();
                m[IxDyn(&flat)] -= h;
                let (fp, fm) = if *which == 0 {
                    (f(&p, &w0), f(&m, &w0))
                } else {
                    (f(&x0, &p), f(&x0, &m))
                };
                let fd = (fp - fm) / (2.0 * h);
                let an = g[IxDyn(&flat)];
                assert!(
                    (fd - an).abs() < 1e-5 * fd.abs().max(an.abs()).max(1.0),
                    "input {which} coord {flat:?}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::plain(2, 1);
        let x0 = randn(&[1, 2, 7, 8], &mut rng);
        let w0 = randn(&[3, 2, 3, 3], &mut rng);
        let build = |x0: &ArrayD<f64>, w0: &ArrayD<f64>| -> f64 {
            let y = conv2d(
                &Tensor::from_array(x0.clone()),
                &Tensor::from_array(w0.clone()),
                spec,
            );
            (&y * &y).sum_all().item()
        };
        let x = Tensor::param_from(x0.clone());
        let w = Tensor::param_from(w0.clone());
        let y = conv2d(&x, &w, spec);
        let gs = grad(&(&y * &y).sum_all(), &[&x, &w], None);
        let h = 1e-6;
        let gx = gs[0].to_array();
        let gw = gs[1].to_array();
        for (i, idx) in [[0, 1, 3, 4], [0, 0, 0, 0], [0, 1, 6, 7]].iter().enumerate() {
            let mut p = x0.clone();
            p[IxDyn(idx)] += h;
            let mut m = x0.clone();
            m[IxDyn(idx)] -= h;
            let fd = (build(&p, &w0) - build(&m, &w0)) / (2.0 * h);
            let an = gx[IxDyn(idx)];
            assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "x probe {i}: {an} vs {fd}");
        }
        for (i, idx) in [[0, 0, 1, 1], [2, 1, 0, 2]].iter().enumerate() {
            let mut p = w0.clone();
            p[IxDyn(idx)] += h;
            let mut m = w0.clone();
            m[IxDyn(idx)] -= h;
            let fd = (build(&x0, &p) - build(&x0, &m)) / (2.0 * h);
            let an = gw[IxDyn(idx)];
            assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "w probe {i}: {an} vs {fd}");
        }
    }

    #[test]
    fn igrad_as_transposed_conv_shapes() {
        // The generator chain 4 -> 7 -> 13 -> 25 -> 49 -> 97 under k=3, s=2, p=1.
        let spec = ConvSpec::plain(2, 1);
        let mut len = 4usize;
        for expect in [7usize, 13, 25, 49, 97] {
            let g = Tensor::from_array(ArrayD::<f64>::zeros(IxDyn(&[1, 2, len, len])));
            let w = Tensor::from_array(ArrayD::<f64>::zeros(IxDyn(&[2, 2, 3, 3])));
            let up = conv2d_igrad(&g, &w, spec, (spec.in_len(len, 3), spec.in_len(len, 3)));
            assert_eq!(up.shape(), &[1, 2, expect, expect]);
            len = expect;
        }
    }

    #[test]
    fn second_order_conv_gradient_penalty_style() {
        // p(w) = sum_i (d/dx sum conv(x, w))_i^2, checked against FD in w.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::plain(1, 1);
        let x0 = randn(&[1, 1, 9], &mut rng);
        let w0 = randn(&[2, 1, 3], &mut rng);
        let phi = |w0: &ArrayD<f64>| -> (f64, ArrayD<f64>) {
            let x = Tensor::param_from(x0.clone());
            let w = Tensor::param_from(w0.clone());
            let y = conv1d(&x, &w, spec).sum_all();
            let gx = grad(&y, &[&x], None).remove(0);
            let p = (&gx * &gx).sum_all();
            let gw = grad(&p, &[&w], None).remove(0).to_array();
            (p.item(), gw)
        };
        let (_, gw) = phi(&w0);
        let h = 1e-6;
        for idx in [[0usize, 0, 0], [1, 0, 2], [0, 0, 1]] {
            let mut p = w0.clone();
            p[IxDyn(&idx)] += h;
            let mut m = w0.clone();
            m[IxDyn(&idx)] -= h;
            let fd = (phi(&p).0 - phi(&m).0) / (2.0 * h);
            let an = gw[IxDyn(&idx)];
            assert!(
                (fd - an).abs() < 1e-5 * fd.abs().max(an.abs()).max(1.0),
                "coord {idx:?}: {an} vs {fd}"
            );
        }
    }
}
