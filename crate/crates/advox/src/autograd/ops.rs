//! Elementwise, reduction, shape, and matmul operations.
//!
//! Every backward rule composes existing ops, so gradient graphs remain
//! differentiable. The only captured arrays are piecewise-constant masks
//! (relu, clamp, abs, floors), whose second derivative is zero almost
//! everywhere.

use super::{grad, Real, Storage, Tensor};
use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice, Zip};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn binary_forward<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> ArrayD<F> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.data().broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.data().broadcast(IxDyn(&shape)).expect("rhs broadcast");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// Sum `g` down to `target` shape, inverting a broadcast.
fn reduce_to<F: Real>(g: &Tensor<F>, target: &[usize]) -> Tensor<F> {
    if g.shape() == target {
        return g.clone();
    }
    let gs = g.shape().to_vec();
    let lead = gs.len() - target.len();
    let mut axes: Vec<usize> = (0..lead).collect();
    for (i, &t) in target.iter().enumerate() {
        if t == 1 && gs[lead + i] > 1 {
            axes.push(lead + i);
        }
    }
    let summed = if axes.is_empty() { g.clone() } else { g.sum_axes(&axes, false) };
    summed.reshape(target)
}

fn unary<F: Real>(
    x: &Tensor<F>,
    f: impl Fn(F) -> F,
    make_grad: impl Fn(&Tensor<F>, &Tensor<F>) -> Tensor<F> + 'static,
) -> Tensor<F> {
    let data = x.data().mapv(f);
    Tensor::from_op(
        data,
        vec![x.clone()],
        Box::new(move |g, parents, _| vec![Some(make_grad(g, &parents[0]))]),
    )
}

/// Elementwise multiply by a captured constant mask.
fn masked_grad<F: Real>(x: &Tensor<F>, f: impl Fn(F) -> F, mask: Storage<F>) -> Tensor<F> {
    let data = x.data().mapv(f);
    Tensor::from_op(
        data,
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(g * &Tensor::constant(mask.clone()))]),
    )
}

impl<F: Real> Tensor<F> {
    pub fn add(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self, rhs, |a, b| a + b);
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents, needs| {
                vec![
                    needs[0].then(|| reduce_to(g, parents[0].shape())),
                    needs[1].then(|| reduce_to(g, parents[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self, rhs, |a, b| a - b);
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents, needs| {
                vec![
                    needs[0].then(|| reduce_to(g, parents[0].shape())),
                    needs[1].then(|| reduce_to(&g.neg(), parents[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self, rhs, |a, b| a * b);
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents, needs| {
                vec![
                    needs[0].then(|| reduce_to(&(g * &parents[1]), parents[0].shape())),
                    needs[1].then(|| reduce_to(&(g * &parents[0]), parents[1].shape())),
                ]
            }),
        )
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let data = binary_forward(self, rhs, |a, b| a / b);
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents, needs| {
                let (a, b) = (&parents[0], &parents[1]);
                vec![
                    needs[0].then(|| reduce_to(&(g / b), a.shape())),
                    needs[1].then(|| reduce_to(&(&(&g.neg() * a) / &(b * b)), b.shape())),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        unary(self, |v| -v, |g, _| g.neg())
    }

    pub fn exp(&self) -> Tensor<F> {
        unary(self, F::exp, |g, x| g * &x.exp())
    }

    pub fn ln(&self) -> Tensor<F> {
        unary(self, F::ln, |g, x| g / x)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        unary(self, F::sqrt, |g, x| g / &x.sqrt().scale(F::from_f64c(2.0)))
    }

    pub fn tanh(&self) -> Tensor<F> {
        unary(self, F::tanh, |g, x| {
            let t = x.tanh();
            g * &(&Tensor::scalar(F::one()) - &(&t * &t))
        })
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        let sig = |v: F| F::one() / (F::one() + (-v).exp());
        unary(self, sig, |g, x| {
            let s = x.sigmoid();
            g * &(&s * &(&Tensor::scalar(F::one()) - &s))
        })
    }

    pub fn abs(&self) -> Tensor<F> {
        let mask = self.data().mapv(|v| {
            if v > F::zero() {
                F::one()
            } else if v < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        });
        masked_grad(self, F::abs, mask.into_shared())
    }

    pub fn relu(&self) -> Tensor<F> {
        let mask = self
            .data()
            .mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        masked_grad(self, |v| v.max(F::zero()), mask.into_shared())
    }

    pub fn leaky_relu(&self, slope: F) -> Tensor<F> {
        let mask = self
            .data()
            .mapv(|v| if v > F::zero() { F::one() } else { slope });
        masked_grad(
            self,
            move |v| if v > F::zero() { v } else { v * slope },
            mask.into_shared(),
        )
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: F, hi: F) -> Tensor<F> {
        let mask = self
            .data()
            .mapv(|v| if v > lo && v < hi { F::one() } else { F::zero() });
        masked_grad(self, move |v| v.max(lo).min(hi), mask.into_shared())
    }

    /// Elementwise `max(x, c)`; gradient flows only where `x > c`.
    pub fn max_scalar(&self, c: F) -> Tensor<F> {
        let mask = self
            .data()
            .mapv(|v| if v > c { F::one() } else { F::zero() });
        masked_grad(self, move |v| v.max(c), mask.into_shared())
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        unary(self, move |v| v * c, move |g, _| g.scale(c))
    }

    pub fn add_scalar(&self, c: F) -> Tensor<F> {
        unary(self, move |v| v + c, |g, _| g.clone())
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum_all(&self) -> Tensor<F> {
        let total = self.data().sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.broadcast_to(&shape))]),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = F::from_usize(self.numel()).unwrap();
        self.sum_all().scale(F::one() / n)
    }

    /// Sum over the given axes. `keepdim` keeps them as size-1 axes.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<F> {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let in_shape = self.shape().to_vec();
        let mut data = self.to_array();
        for &ax in sorted.iter().rev() {
            data = data.sum_axis(Axis(ax));
        }
        let mut kept = in_shape.clone();
        for &ax in &sorted {
            kept[ax] = 1;
        }
        if keepdim {
            data = data.into_shape_with_order(IxDyn(&kept)).unwrap();
        }
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(g.reshape(&kept).broadcast_to(&in_shape))]
            }),
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<F> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keepdim)
            .scale(F::one() / F::from_usize(n).unwrap())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<F> {
        let data = self
            .data()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        let orig = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(reduce_to(g, &orig))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        let orig = self.shape().to_vec();
        let data = self
            .data()
            .to_owned()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", orig, shape));
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.reshape(&orig))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<F> {
        let data = self
            .to_array()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.permute(&inverse))]),
        )
    }

    /// Rectangular slice: per axis a `(start, len)` window.
    pub fn slice_view(&self, bounds: &[(usize, usize)]) -> Tensor<F> {
        assert_eq!(bounds.len(), self.shape().len());
        let data = self
            .data()
            .slice_each_axis(|ad| {
                let (s, l) = bounds[ad.axis.index()];
                Slice::from(s..s + l)
            })
            .to_owned();
        let starts: Vec<usize> = bounds.iter().map(|&(s, _)| s).collect();
        let full = self.shape().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.pad_into(&starts, &full))]),
        )
    }

    /// Embed into a zero tensor of shape `full` at offsets `starts`.
    pub fn pad_into(&self, starts: &[usize], full: &[usize]) -> Tensor<F> {
        assert_eq!(starts.len(), full.len());
        let mut data = ArrayD::zeros(IxDyn(full));
        let shape = self.shape().to_vec();
        data.slice_each_axis_mut(|ad| {
            let i = ad.axis.index();
            Slice::from(starts[i]..starts[i] + shape[i])
        })
        .assign(&self.data().view());
        let starts_c = starts.to_vec();
        let lens = shape.clone();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let bounds: Vec<(usize, usize)> =
                    starts_c.iter().copied().zip(lens.iter().copied()).collect();
                vec![Some(g.slice_view(&bounds))]
            }),
        )
    }

    /// Repeat each entry along `axis` `k` times (nearest-neighbor upsample).
    pub fn repeat_interleave(&self, axis: usize, k: usize) -> Tensor<F> {
        let in_shape = self.shape().to_vec();
        let mut mid = in_shape.clone();
        mid.insert(axis + 1, k);
        let mut out_shape = in_shape.clone();
        out_shape[axis] *= k;
        let data = self
            .data()
            .view()
            .insert_axis(Axis(axis + 1))
            .broadcast(IxDyn(&mid))
            .unwrap()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&out_shape))
            .unwrap();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(g.reshape(&mid).sum_axes(&[axis + 1], false))]
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(rhs.shape().len(), 2, "matmul rhs must be 2-d");
        assert_eq!(self.shape()[1], rhs.shape()[0], "matmul inner dims");
        let a = self.data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = rhs.data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let data = a.dot(&b).into_dyn();
        Tensor::from_op(
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents, needs| {
                vec![
                    needs[0].then(|| g.matmul(&parents[1].permute(&[1, 0]))),
                    needs[1].then(|| parents[0].permute(&[1, 0]).matmul(g)),
                ]
            }),
        )
    }

    /// For a `[n, c]` tensor, pick `self[i, idx[i]]` giving shape `[n]`.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2);
        let (n, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(idx.len(), n);
        let mut data = ArrayD::zeros(IxDyn(&[n]));
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < c, "column index out of range");
            data[[i]] = self.data()[[i, j]];
        }
        let idx_c = idx.to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.scatter_rows(&idx_c, c))]),
        )
    }

    /// Inverse of [`select_rows`]: place a `[n]` vector into a zero `[n, c]`.
    pub fn scatter_rows(&self, idx: &[usize], cols: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 1);
        let n = self.shape()[0];
        assert_eq!(idx.len(), n);
        let mut data = ArrayD::zeros(IxDyn(&[n, cols]));
        for (i, &j) in idx.iter().enumerate() {
            data[[i, j]] = self.data()[[i]];
        }
        let idx_c = idx.to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.select_rows(&idx_c))]),
        )
    }
}

/// Concatenate along `axis`.
pub fn concat<F: Real>(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|t| t.data().view()).collect();
    let data = concatenate(Axis(axis), &views).expect("concat shapes");
    let lens: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    Tensor::from_op(
        data,
        parts.to_vec(),
        Box::new(move |g, parents, needs| {
            let mut out = Vec::with_capacity(parents.len());
            let mut off = 0usize;
            for (i, &len) in lens.iter().enumerate() {
                if needs[i] {
                    let bounds: Vec<(usize, usize)> = g
                        .shape()
                        .iter()
                        .enumerate()
                        .map(|(ax, &d)| if ax == axis { (off, len) } else { (0, d) })
                        .collect();
                    out.push(Some(g.slice_view(&bounds)));
                } else {
                    out.push(None);
                }
                off += len;
            }
            out
        }),
    )
}

/// Numerically stable log-softmax along `axis`.
///
/// The subtracted per-slice max is detached; softmax is shift invariant,
/// so the gradient is unaffected.
pub fn log_softmax<F: Real>(t: &Tensor<F>, axis: usize) -> Tensor<F> {
    let maxes = t
        .data()
        .map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(F::neg_infinity(), F::max)
        })
        .insert_axis(Axis(axis))
        .to_owned();
    let shifted = t - &Tensor::from_array(maxes);
    let log_z = shifted.exp().sum_axes(&[axis], true).ln();
    &shifted - &log_z
}

/// Mean negative log-likelihood of `labels` under `logits` rows.
pub fn cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Tensor<F> {
    log_softmax(logits, 1).select_rows(labels).mean_all().neg()
}

/// Euclidean norm of the full tensor, as a 0-d tensor. `eps` keeps the
/// square root differentiable at zero.
pub fn l2_norm<F: Real>(t: &Tensor<F>, eps: F) -> Tensor<F> {
    (t * t).sum_all().add_scalar(eps).sqrt()
}

/// Convenience: gradient of a scalar `loss` with respect to one tensor,
/// returned as a plain array.
pub fn grad_of<F: Real>(loss: &Tensor<F>, wrt: &Tensor<F>) -> ArrayD<F> {
    grad(loss, &[wrt], None).remove(0).to_array()
}

macro_rules! impl_binop {
    ($trait:ident, $fn:ident) => {
        impl<'a, F: Real> std::ops::$trait<&'a Tensor<F>> for &'a Tensor<F> {
            type Output = Tensor<F>;
            fn $fn(self, rhs: &'a Tensor<F>) -> Tensor<F> {
                Tensor::$fn(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
impl_binop!(Div, div);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar-valued graph builder.
    fn fd_check(
        shape: &[usize],
        build: impl Fn(&Tensor<f64>) -> Tensor<f64>,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(shape, &mut rng).mapv(|v| v * 0.8 + 1.2); // keep positive ops safe
        let x = Tensor::param_from(x0.clone());
        let y = build(&x);
        let g = grad(&y, &[&x], None)[0].to_array();
        let h = 1e-6;
        for (i, _) in x0.iter().enumerate().take(12) {
            let idx: Vec<usize> = {
                let mut rem = i;
                shape
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
            let mut xp = x0.clone();
            xp[IxDyn(&idx)] += h;
            let mut xm = x0.clone();
            xm[IxDyn(&idx)] -= h;
            let yp = build(&Tensor::from_array(xp).clamp(f64::NEG_INFINITY, f64::INFINITY)).item();
            let ym = build(&Tensor::from_array(xm).clamp(f64::NEG_INFINITY, f64::INFINITY)).item();
            let fd = (yp - ym) / (2.0 * h);
            let an = g[IxDyn(&idx)];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "coord {idx:?}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        fd_check(
            &[3, 4],
            |x| {
                let a = x.exp().ln();
                let b = x.tanh().mul(&x.sigmoid());
                (&a + &b).mul(&x.sqrt()).sum_all()
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn fd_broadcast_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b0 = randn(&[1, 4], &mut rng);
        fd_check(
            &[3, 4],
            move |x| {
                let b = Tensor::from_array(b0.clone());
                let y = &(x * &b) / &b.exp();
                y.sub(&b).sum_all()
            },
            11,
            1e-5,
        );
    }

    #[test]
    fn fd_reductions_and_shapes() {
        fd_check(
            &[2, 3, 4],
            |x| {
                let s = x.sum_axes(&[1], true); // [2,1,4]
                let m = x.mean_axes(&[0, 2], false); // [3]
                let r = x.reshape(&[4, 6]).permute(&[1, 0]); // [6,4]
                let sl = r.slice_view(&[(1, 3), (0, 2)]); // [3,2]
                (&s.sum_all() + &m.sum_all()).add(&(&sl * &sl).sum_all())
            },
            13,
            1e-5,
        );
    }

    #[test]
    fn fd_matmul_and_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = randn(&[4, 3], &mut rng);
        fd_check(
            &[2, 4],
            move |x| {
                let w = Tensor::from_array(w0.clone());
                let z = x.matmul(&w); // [2,3]
                cross_entropy(&z, &[0, 2])
            },
            17,
            1e-5,
        );
    }

    #[test]
    fn fd_concat_pad_repeat() {
        fd_check(
            &[2, 3],
            |x| {
                let c = concat(&[x.clone(), x.scale(2.0)], 1); // [2,6]
                let p = c.pad_into(&[1, 0], &[4, 6]);
                let u = p.repeat_interleave(0, 2); // [8,6]
                (&u * &u).sum_all()
            },
            23,
            1e-5,
        );
    }

    #[test]
    fn fd_l2_norm_and_relu() {
        fd_check(
            &[5],
            |x| {
                let r = x.relu().add(&x.leaky_relu(0.1));
                l2_norm(&r, 1e-12)
            },
            29,
            1e-4,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_array(randn(&[6, 9], &mut rng).mapv(|v| v * 10.0));
        let p = log_softmax(&x, 1).exp();
        for row in p.to_array().rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let x = Tensor::from_array(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, 0.5, 0.5, 0.5]).unwrap(),
        );
        let ce = cross_entropy(&x, &[2, 1]).item();
        let z0: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let z1: f64 = (3.0 * 0.5f64.exp()).ln();
        let manual = ((z0 - 3.0) + (z1 - 0.5)) / 2.0;
        assert!((ce - manual).abs() < 1e-12);
    }

    #[test]
    fn second_order_matmul_norm() {
        // phi(w) = || d/dx (x W) . 1 ||^2 depends on W; check its gradient by FD.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w0 = randn(&[3, 3], &mut rng);
        let x0 = randn(&[2, 3], &mut rng);
        let phi = |w0: &ArrayD<f64>| -> (f64, Option<ArrayD<f64>>) {
            let w = Tensor::param_from(w0.clone());
            let x = Tensor::param_from(x0.clone());
            let y = x.matmul(&w).sum_all();
            let gx = grad(&y, &[&x], None).remove(0);
            let p = (&gx * &gx).sum_all();
            let gw = grad(&p, &[&w], None).remove(0).to_array();
            (p.item(), Some(gw))
        };
        let (_, gw) = phi(&w0);
        let gw = gw.unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut wp = w0.clone();
                wp[[i, j]] += h;
                let mut wm = w0.clone();
                wm[[i, j]] -= h;
                let fd = (phi(&wp).0 - phi(&wm).0) / (2.0 * h);
                let an = gw[[i, j]];
                assert!(
                    (fd - an).abs() < 1e-5 * fd.abs().max(an.abs()).max(1.0),
                    "second-order ({i},{j}): {an} vs {fd}"
                );
            }
        }
    }
}
