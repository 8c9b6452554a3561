//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records the operations applied to tracked [`Var`]s. Untracked
//! vars (constants) never touch a tape, so inference without any tracked
//! leaf keeps no intermediate values alive.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom, GroupNormCache};
use crate::{Float, Tensor};

type BackwardFn<F> = Box<dyn FnOnce(&Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<F>>,
}

/// Operation recorder shared by every tracked [`Var`] derived from it.
pub struct Tape<F> {
    nodes: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Self { nodes: Rc::clone(&self.nodes) }
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    fn same(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    fn push(&self, node: Node<F>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<F>) -> Var<F> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<F>>) -> Var<F> {
        let id = self.push(Node { parents: Vec::new(), backward: None });
        Var { value, tracked: Some((self.clone(), id)) }
    }

    /// Back-propagates from the scalar `root`, consuming the recorded
    /// adjoint closures. Returns gradients for every reachable leaf.
    pub fn backward(&self, root: &Var<F>) -> Gradients<F> {
        assert_eq!(root.value.numel(), 1, "backward root must be a scalar, got {:?}", root.shape());
        let Some((tape, root_id)) = &root.tracked else {
            return Gradients { grads: HashMap::new() };
        };
        assert!(tape.same(self), "root belongs to a different tape");
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[*root_id] = Some(Tensor::full(root.shape().to_vec(), F::one()));
        let mut leaves = HashMap::new();
        for id in (0..=*root_id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            match node.backward.take() {
                None => {
                    leaves.insert(id, grad);
                }
                Some(back) => {
                    let parent_grads = back(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        let (Some(p), Some(pg)) = (parent, pg) else { continue };
                        match &mut grads[*p] {
                            Some(acc) => acc.axpy(F::one(), &pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: HashMap<usize, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the backward root with respect to a tracked leaf, or
    /// `None` when the root does not depend on it.
    pub fn wrt(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        var.tracked.as_ref().and_then(|(_, id)| self.grads.get(id))
    }

    pub fn take(&mut self, var: &Var<F>) -> Option<Tensor<F>> {
        var.tracked.as_ref().and_then(|(_, id)| self.grads.remove(id))
    }
}

/// A tensor value, optionally tracked on a [`Tape`].
pub struct Var<F> {
    value: Rc<Tensor<F>>,
    tracked: Option<(Tape<F>, usize)>,
}

impl<F> Clone for Var<F> {
    fn clone(&self) -> Self {
        Self { value: Rc::clone(&self.value), tracked: self.tracked.clone() }
    }
}

impl<F: Float> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("tracked", &self.tracked.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl<F: Float> Var<F> {
    /// An untracked value; gradients never flow into it.
    pub fn constant(value: Tensor<F>) -> Self {
        Self { value: Rc::new(value), tracked: None }
    }

    pub fn constant_rc(value: Rc<Tensor<F>>) -> Self {
        Self { value, tracked: None }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<F>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked.is_some()
    }

    /// Same value with the gradient path cut (stop-gradient).
    pub fn detach(&self) -> Self {
        Self { value: Rc::clone(&self.value), tracked: None }
    }

    fn tape_of<'a>(vars: impl IntoIterator<Item = &'a Var<F>>) -> Option<Tape<F>> {
        let mut found: Option<Tape<F>> = None;
        for v in vars {
            if let Some((t, _)) = &v.tracked {
                match &found {
                    Some(f) => assert!(f.same(t), "operands belong to different tapes"),
                    None => found = Some(t.clone()),
                }
            }
        }
        found
    }

    fn record(
        inputs: &[&Var<F>],
        value: Tensor<F>,
        backward: impl FnOnce(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var<F> {
        let value = Rc::new(value);
        match Self::tape_of(inputs.iter().copied()) {
            None => Var { value, tracked: None },
            Some(tape) => {
                let parents: Vec<Option<usize>> =
                    inputs.iter().map(|v| v.tracked.as_ref().map(|(_, id)| *id)).collect();
                let needs: Vec<bool> = parents.iter().map(Option::is_some).collect();
                let id = tape.push(Node {
                    parents,
                    backward: Some(Box::new(move |g| backward(g, &needs))),
                });
                Var { value, tracked: Some((tape, id)) }
            }
        }
    }

    fn unary(&self, value: Tensor<F>, backward: impl FnOnce(&Tensor<F>) -> Tensor<F> + 'static) -> Var<F> {
        if self.tracked.is_none() {
            return Var::constant(value);
        }
        Self::record(&[self], value, move |g, _| vec![Some(backward(g))])
    }

    /// Element-wise map with derivative `dfdx(x, y)` given input and output.
    fn pointwise(&self, f: impl Fn(F) -> F, dfdx: impl Fn(F, F) -> F + 'static) -> Var<F> {
        let y = self.value.map(f);
        if self.tracked.is_none() {
            return Var::constant(y);
        }
        let x = self.value_rc();
        let y_saved = Rc::new(y.clone());
        self.unary(y, move |g| {
            let mut out = g.clone();
            for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y_saved.data()) {
                *o *= dfdx(xv, yv);
            }
            out
        })
    }

    fn broadcast_binary(
        &self,
        other: &Var<F>,
        f: impl Fn(F, F) -> F,
        grads: impl FnOnce(&Tensor<F>, &Tensor<F>, &Tensor<F>, bool, bool) -> (Option<Tensor<F>>, Option<Tensor<F>>)
            + 'static,
    ) -> Var<F> {
        let value = self.value.broadcast_zip(&other.value, f);
        let (a, b) = (self.value_rc(), other.value_rc());
        Self::record(&[self, other], value, move |g, needs| {
            let (ga, gb) = grads(g, &a, &b, needs[0], needs[1]);
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        self.broadcast_binary(other, |a, b| a + b, |g, a, b, na, nb| {
            (na.then(|| g.sum_to(a.shape())), nb.then(|| g.sum_to(b.shape())))
        })
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        self.broadcast_binary(other, |a, b| a - b, |g, a, b, na, nb| {
            (na.then(|| g.sum_to(a.shape())), nb.then(|| g.map(|v| -v).sum_to(b.shape())))
        })
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        self.broadcast_binary(other, |a, b| a * b, |g, a, b, na, nb| {
            (
                na.then(|| g.broadcast_zip(b, |x, y| x * y).sum_to(a.shape())),
                nb.then(|| g.broadcast_zip(a, |x, y| x * y).sum_to(b.shape())),
            )
        })
    }

    pub fn div(&self, other: &Var<F>) -> Var<F> {
        self.broadcast_binary(other, |a, b| a / b, |g, a, b, na, nb| {
            (
                na.then(|| g.broadcast_zip(b, |x, y| x / y).sum_to(a.shape())),
                nb.then(|| {
                    let ab = a.broadcast_zip(b, |x, y| -x / (y * y));
                    g.zip_map(&ab, |x, y| x * y).sum_to(b.shape())
                }),
            )
        })
    }

    pub fn add_const(&self, other: &Tensor<F>) -> Var<F> {
        self.add(&Var::constant(other.clone()))
    }

    pub fn mul_const(&self, other: &Tensor<F>) -> Var<F> {
        self.mul(&Var::constant(other.clone()))
    }

    pub fn add_scalar(&self, c: F) -> Var<F> {
        self.pointwise(move |x| x + c, |_, _| F::one())
    }

    pub fn scale(&self, c: F) -> Var<F> {
        let y = self.value.map(|x| x * c);
        self.unary(y, move |g| g.map(|v| v * c))
    }

    pub fn neg(&self) -> Var<F> {
        self.scale(-F::one())
    }

    pub fn square(&self) -> Var<F> {
        self.pointwise(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Var<F> {
        let half = F::of(0.5);
        self.pointwise(|x| x.sqrt(), move |_, y| half / y)
    }

    pub fn tanh(&self) -> Var<F> {
        self.pointwise(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn silu(&self) -> Var<F> {
        self.pointwise(
            |x| x / (F::one() + (-x).exp()),
            |x, _| {
                let s = F::one() / (F::one() + (-x).exp());
                s * (F::one() + x * (F::one() - s))
            },
        )
    }

    pub fn sum_all(&self) -> Var<F> {
        let shape = self.shape().to_vec();
        self.unary(Tensor::scalar(self.value.sum()), move |g| Tensor::full(shape, g.item()))
    }

    pub fn mean_all(&self) -> Var<F> {
        let n = F::of(self.value.numel() as f64);
        self.sum_all().scale(F::one() / n)
    }

    /// Sum-reduction to a broadcast-compatible smaller shape.
    pub fn sum_to(&self, target: &[usize]) -> Var<F> {
        let shape = self.shape().to_vec();
        let value = self.value.sum_to(target);
        self.unary(value, move |g| g.broadcast_zip(&Tensor::zeros(shape), |a, _| a))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<F> {
        let old = self.shape().to_vec();
        let value = (*self.value).clone().reshape(shape);
        self.unary(value, move |g| g.clone().reshape(old))
    }

    pub fn permute(&self, perm: &[usize]) -> Var<F> {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.unary(self.value.permute(perm), move |g| g.permute(&inverse))
    }

    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        let value = kernels::matmul(&self.value, &other.value);
        let (a, b) = (self.value_rc(), other.value_rc());
        Self::record(&[self, other], value, move |g, needs| {
            let (ga, gb) = kernels::matmul_backward(&a, &b, g, needs[0], needs[1]);
            vec![ga, gb]
        })
    }

    /// 2-D cross-correlation with `weight: [Cout, Cin, kh, kw]` (no bias).
    pub fn conv2d(&self, weight: &Var<F>, geom: ConvGeom) -> Var<F> {
        let value = kernels::conv2d(&self.value, &weight.value, &geom);
        let (x, w) = (self.value_rc(), weight.value_rc());
        Self::record(&[self, weight], value, move |g, needs| {
            let (gx, gw) = kernels::conv2d_backward(&x, &w, &geom, g, needs[0], needs[1]);
            vec![gx, gw]
        })
    }

    /// Group normalisation without affine parameters.
    pub fn group_norm(&self, groups: usize, eps: F) -> Var<F> {
        let cache: GroupNormCache<F> = kernels::group_norm(&self.value, groups, eps);
        let value = cache.normalized.clone();
        if self.tracked.is_none() {
            return Var::constant(value);
        }
        self.unary(value, move |g| kernels::group_norm_backward(&cache, g))
    }

    pub fn softmax_last(&self) -> Var<F> {
        let y = kernels::softmax_last(&self.value);
        if self.tracked.is_none() {
            return Var::constant(y);
        }
        let saved = Rc::new(y.clone());
        self.unary(y, move |g| kernels::softmax_last_backward(&saved, g))
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest2d(&self, fh: usize, fw: usize) -> Var<F> {
        self.unary(self.value.upsample_nearest2d(fh, fw), move |g| g.downsample_sum2d(fh, fw))
    }
}

macro_rules! binary_operator {
    ($trait:ident, $method:ident, $call:ident) => {
        impl<F: Float> std::ops::$trait<&Var<F>> for &Var<F> {
            type Output = Var<F>;
            fn $method(self, rhs: &Var<F>) -> Var<F> {
                self.$call(rhs)
            }
        }
    };
}

binary_operator!(Add, add, add);
binary_operator!(Sub, sub, sub);
binary_operator!(Mul, mul, mul);
binary_operator!(Div, div, div);
