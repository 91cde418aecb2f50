//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Graphs are immutable DAGs of reference-counted nodes. Backward
//! functions build new graph nodes rather than raw arrays, so a gradient
//! is itself differentiable: second-order terms such as a gradient
//! penalty on a critic fall out of calling [`grad`] twice.
//!
//! Node ids increase monotonically per thread and every node is created
//! after its parents, so descending id order is a valid reverse
//! topological order. Gradient accumulation walks nodes in that order,
//! which makes every reduction deterministic.
//!
//! Shape mismatches and malformed op arguments panic: they are bugs in
//! the calling code, not runtime conditions.

mod conv;
mod ops;

pub use conv::{conv1d, conv1d_igrad, conv1d_wgrad, conv2d, conv2d_igrad, conv2d_wgrad, ConvSpec};
pub use ops::{concat, cross_entropy, grad_of, l2_norm, log_softmax};

use ndarray::{ArcArray, ArrayD, IxDyn};
use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

/// Scalar types the engine works over.
///
/// `f32` is the production dtype; `f64` exists for finite-difference
/// oracles and anywhere verification tolerance matters more than speed.
pub trait Real:
    ndarray::NdFloat + num_traits::FloatConst + num_traits::FromPrimitive + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Shared tensor storage: reference-counted, copy-on-write.
pub type Storage<F> = ArcArray<F, IxDyn>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: receives the upstream gradient, the node's parents, and
/// a mask of which parents actually need gradients. Returns one optional
/// gradient tensor per parent, skipping the ones not needed.
pub(crate) type GradFn<F> =
    Box<dyn Fn(&Tensor<F>, &[Tensor<F>], &[bool]) -> Vec<Option<Tensor<F>>>>;

pub(crate) struct Node<F: Real> {
    id: u64,
    data: Storage<F>,
    parents: Vec<Tensor<F>>,
    grad_fn: Option<GradFn<F>>,
    requires_grad: bool,
}

/// A node in an autodiff graph. Cheap to clone.
pub struct Tensor<F: Real>(Rc<Node<F>>);

impl<F: Real> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.0.id,
            self.shape(),
            self.0.requires_grad
        )
    }
}

impl<F: Real> Tensor<F> {
    /// Leaf that participates in differentiation (a parameter or an
    /// attacked input).
    pub fn param(data: Storage<F>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        }))
    }

    /// Leaf treated as a constant.
    pub fn constant(data: Storage<F>) -> Self {
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
        }))
    }

    /// Constant leaf from an owned array.
    pub fn from_array(data: ArrayD<F>) -> Self {
        Self::constant(data.into_shared())
    }

    /// Differentiable leaf from an owned array.
    pub fn param_from(data: ArrayD<F>) -> Self {
        Self::param(data.into_shared())
    }

    /// 0-dimensional constant.
    pub fn scalar(v: F) -> Self {
        Self::from_array(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(
        data: ArrayD<F>,
        parents: Vec<Tensor<F>>,
        grad_fn: GradFn<F>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        // No-grad results drop their parents so long forward-only chains
        // free intermediates as they go.
        let (parents, grad_fn) = if requires_grad {
            (parents, Some(grad_fn))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: fresh_id(),
            data: data.into_shared(),
            parents,
            grad_fn,
            requires_grad,
        }))
    }

    /// Underlying data.
    pub fn data(&self) -> &Storage<F> {
        &self.0.data
    }

    /// Owned copy of the data.
    pub fn to_array(&self) -> ArrayD<F> {
        self.0.data.to_owned()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// The single value of a 0-d or 1-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        *self.0.data.iter().next().unwrap()
    }

    /// New constant leaf sharing this tensor's storage; cuts the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.data.clone())
    }
}

/// Gradients of `output` with respect to each tensor in `wrt`.
///
/// `seed` is the upstream gradient for `output`; when `None` the output
/// must be a single element and the seed is one. Tensors in `wrt` that
/// the output does not depend on get zero gradients. The returned
/// gradients are graph nodes themselves and can be differentiated again.
pub fn grad<F: Real>(output: &Tensor<F>, wrt: &[&Tensor<F>], seed: Option<Tensor<F>>) -> Vec<Tensor<F>> {
    let seed = match seed {
        Some(s) => {
            assert_eq!(s.shape(), output.shape(), "seed shape must match output");
            s
        }
        None => {
            assert_eq!(
                output.numel(),
                1,
                "grad() without a seed requires a single-element output"
            );
            Tensor::from_array(ArrayD::from_elem(IxDyn(output.shape()), F::one()))
        }
    };

    // Collect the reachable subgraph that requires gradients.
    let mut reachable: HashMap<u64, Tensor<F>> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(t) = stack.pop() {
        if !t.0.requires_grad || reachable.contains_key(&t.0.id) {
            continue;
        }
        reachable.insert(t.0.id, t.clone());
        for p in &t.0.parents {
            stack.push(p.clone());
        }
    }

    let mut grads: HashMap<u64, Tensor<F>> = HashMap::new();
    if reachable.contains_key(&output.id()) {
        grads.insert(output.id(), seed);

        let mut order: Vec<u64> = reachable.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        for id in order {
            let node = &reachable[&id];
            let Some(g) = grads.get(&id).cloned() else { continue };
            let Some(grad_fn) = node.0.grad_fn.as_ref() else { continue };
            let needs: Vec<bool> = node
                .0
                .parents
                .iter()
                .map(|p| p.0.requires_grad)
                .collect();
            let parent_grads = grad_fn(&g, &node.0.parents, &needs);
            assert_eq!(
                parent_grads.len(),
                node.0.parents.len(),
                "grad_fn must return one entry per parent"
            );
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                assert_eq!(
                    pg.shape(),
                    p.shape(),
                    "gradient shape {:?} does not match parent shape {:?}",
                    pg.shape(),
                    p.shape()
                );
                match grads.remove(&p.0.id) {
                    Some(acc) => {
                        grads.insert(p.0.id, &acc + &pg);
                    }
                    None => {
                        grads.insert(p.0.id, pg);
                    }
                }
            }
        }
    }

    wrt.iter()
        .map(|t| match grads.get(&t.0.id) {
            Some(g) => g.clone(),
            None => Tensor::from_array(ArrayD::zeros(IxDyn(t.shape()))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_simple_chain() {
        let x = Tensor::param_from(arr(&[1.0, 2.0, 3.0]));
        let y = (&x * &x).sum_all();
        let g = grad(&y, &[&x], None);
        assert_eq!(g[0].to_array(), arr(&[2.0, 4.0, 6.0]));
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let x = Tensor::param_from(arr(&[1.0, 2.0]));
        let z = Tensor::param_from(arr(&[5.0]));
        let y = x.sum_all();
        let g = grad(&y, &[&z], None);
        assert_eq!(g[0].to_array(), arr(&[0.0]));
    }

    #[test]
    fn constants_block_gradients() {
        let x = Tensor::param_from(arr(&[1.0, 2.0]));
        let c = x.detach();
        let y = (&c * &c).sum_all();
        assert!(!y.requires_grad());
        let g = grad(&y.clamp(f64::NEG_INFINITY, f64::INFINITY).sum_all(), &[&x], None);
        assert_eq!(g[0].to_array(), arr(&[0.0, 0.0]));
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Tensor::param_from(arr(&[3.0]));
        let a = &x * &x; // x^2
        let b = &x + &x; // 2x
        let y = (&a + &b).sum_all(); // x^2 + 2x, dy/dx = 2x + 2 = 8
        let g = grad(&y, &[&x], None);
        assert_eq!(g[0].to_array(), arr(&[8.0]));
    }

    #[test]
    fn second_order_through_grad_graph() {
        // y = x^3; dy/dx = 3x^2; d2y/dx2 = 6x.
        let x = Tensor::param_from(arr(&[2.0]));
        let y = (&(&x * &x) * &x).sum_all();
        let g1 = grad(&y, &[&x], None);
        let g2 = grad(&g1[0].sum_all(), &[&x], None);
        assert_eq!(g1[0].to_array(), arr(&[12.0]));
        assert_eq!(g2[0].to_array(), arr(&[12.0]));
    }

    #[test]
    #[should_panic(expected = "single-element output")]
    fn vector_output_without_seed_panics() {
        let x = Tensor::param_from(arr(&[1.0, 2.0]));
        let y = &x * &x;
        let _ = grad(&y, &[&x], None);
    }
}
