//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Tensors produced by an
//! operation keep their inputs alive through the recorded [`Op`], so the
//! autodiff graph is exactly the set of nodes reachable from a result and is
//! freed when the last handle drops. Operations whose inputs do not require
//! gradients record nothing, which makes frozen-only computation graph-free.
//!
//! Gradients accumulate across repeated [`Tensor::backward`] calls until
//! [`Tensor::zero_grad`] resets them.

mod grad_check;
mod ops;

pub use grad_check::{finite_diff_check, max_relative_error, numeric_grad};

pub use ops::{causal_attention, cross_entropy, rmsnorm, rope, silu, softmax};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording any autodiff graph on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Float:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Recorded operation that produced a tensor, with everything its backward
/// pass needs.
pub(crate) enum Op<T: Float> {
    Leaf,
    MatMul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    /// `x · wᵀ`
    Linear {
        x: Tensor<T>,
        w: Tensor<T>,
    },
    Add {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Mul {
        a: Tensor<T>,
        b: Tensor<T>,
    },
    Scale {
        a: Tensor<T>,
        factor: T,
    },
    Sum {
        a: Tensor<T>,
    },
    Silu {
        a: Tensor<T>,
    },
    Softmax {
        a: Tensor<T>,
    },
    RmsNorm {
        x: Tensor<T>,
        w: Tensor<T>,
        inv_rms: Vec<T>,
    },
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    IndexRows {
        src: Tensor<T>,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: Tensor<T>,
        rows: Vec<usize>,
    },
    ScaleRows {
        x: Tensor<T>,
        col: Tensor<T>,
    },
    RowNormalize {
        a: Tensor<T>,
    },
    Gather {
        a: Tensor<T>,
        idx: Vec<usize>,
    },
    Rope {
        x: Tensor<T>,
        cos: Vec<T>,
        sin: Vec<T>,
        head_dim: usize,
    },
    CausalAttention {
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        n_heads: usize,
        probs: Vec<T>,
    },
}

impl<T: Float> Op<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Linear { x, w } => vec![x, w],
            Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::Silu { a }
            | Op::Softmax { a }
            | Op::RowNormalize { a }
            | Op::Gather { a, .. } => vec![a],
            Op::RmsNorm { x, w, .. } => vec![x, w],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::IndexRows { src, .. } | Op::ScatterRows { src, .. } => vec![src],
            Op::ScaleRows { x, col } => vec![x, col],
            Op::Rope { x, .. } => vec![x],
            Op::CausalAttention { q, k, v, .. } => vec![q, k, v],
        }
    }
}

pub(crate) struct Node<T: Float> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Op<T>,
}

/// Handle to a dense row-major tensor node.
pub struct Tensor<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &*self.data())
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    /// Constant leaf. Fails unless `product(shape) == data.len()`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![T::zero(); n], shape.to_vec(), false)
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![v], vec![], false)
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op: Op::Leaf,
        }))
    }

    /// Result of an operation. The op is only kept when some input needs
    /// gradients.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.0.shape.last().copied().unwrap_or(1)
    }

    /// Number of trailing vectors (product of all axes but the last).
    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            0 => 1,
            n => self.0.shape[..n - 1].iter().product(),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to a leaf's values (optimizer updates, perturbation
    /// in finite-difference checks).
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        assert!(self.is_leaf(), "data_mut on a non-leaf tensor");
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Toggle trainability of a leaf.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "set_requires_grad on a non-leaf tensor");
        self.0.requires_grad.set(on);
        if !on {
            self.zero_grad();
        }
    }

    /// Constant copy that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        // Reshape is an identity on the flat data, so route it through Scale(1)
        // to keep the graph edge.
        Ok(Self::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Scale {
                a: self.clone(),
                factor: T::one(),
            },
        ))
    }

    /// Leaf copy converted to another precision, preserving trainability.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::<U>::leaf(data, self.0.shape.clone(), self.requires_grad() && self.is_leaf())
    }

    /// Back-propagate from a scalar loss. Every tensor reachable from `self`
    /// that requires gradients gets `d self / d tensor` added to its grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let index: std::collections::HashMap<*const Node<T>, usize> =
            order.iter().enumerate().map(|(i, t)| (Rc::as_ptr(&t.0), i)).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; order.len()];
        grads[order.len() - 1] = Some(vec![T::one()]);

        for pos in (0..order.len()).rev() {
            let Some(g) = grads[pos].take() else { continue };
            let node = &order[pos];
            let contributions = ops::backward_op(node, &g);
            for (parent, pg) in contributions {
                let pi = index[&Rc::as_ptr(&parent.0)];
                match &mut grads[pi] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(pg),
                }
            }
            let mut stored = node.0.grad.borrow_mut();
            match stored.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => *stored = Some(g),
            }
        }
        Ok(())
    }

    /// Nodes requiring grad reachable from `self`, parents before children.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests;
