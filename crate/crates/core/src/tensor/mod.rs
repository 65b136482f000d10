//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every operation executed while gradients are
//! enabled records its inputs and a backward rule on the output node. Calling
//! [`Tensor::backward`] on a scalar loss walks the recorded graph once in
//! reverse topological order and accumulates gradients into every
//! `requires_grad` leaf. Graphs are rebuilt on every forward pass, which makes
//! freezing a network as simple as clearing `requires_grad` on its
//! parameters.

mod check;
mod ops;

pub use check::{finite_diff_check, GradCheckEntry, GradCheckReport};

use crate::Scalar;
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when operations record backward rules on this thread.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` with gradient recording disabled (restored on exit).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let guard = Guard(grad_enabled());
    GRAD_ENABLED.with(|g| g.set(false));
    let out = f();
    drop(guard);
    out
}

type BackwardFn<S> = Box<dyn Fn(&[S])>;

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// N-dimensional row-major tensor participating in a reverse-mode graph.
///
/// Cloning a `Tensor` clones the handle, not the buffer; parameters shared
/// between a model and an optimizer stay in sync through the shared node.
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<Node<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, tracked={})",
            n.shape,
            n.requires_grad,
            !n.parents.is_empty()
        )
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            numel == data.len(),
            "tensor data length {} does not match shape {:?} (expects {})",
            data.len(),
            shape,
            numel
        );
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor shape {shape:?} has a zero dimension"
        );
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Self::from_vec(&[], vec![value])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        inputs: &[&Tensor<S>],
        backward: impl Fn(&[S]) + 'static,
    ) -> Self {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        let record = grad_enabled() && inputs.iter().any(|t| t.tracks());
        let out = Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })),
        };
        if record {
            let mut n = out.inner.borrow_mut();
            n.parents = inputs.iter().map(|t| (*t).clone()).collect();
            n.backward = Some(Box::new(backward));
        }
        out
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    /// Borrow the flat row-major buffer.
    pub fn data(&self) -> Ref<'_, [S]> {
        Ref::map(self.inner.borrow(), |n| n.data.as_slice())
    }

    /// Mutable access to the buffer (parameter updates). Panics while the
    /// tensor is borrowed elsewhere.
    pub fn data_mut(&self) -> RefMut<'_, [S]> {
        RefMut::map(self.inner.borrow_mut(), |n| n.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let n = self.inner.borrow();
        assert!(
            n.data.len() == 1,
            "item() requires a single-element tensor, got shape {:?}",
            n.shape
        );
        n.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Mark a leaf as a differentiable parameter (or freeze it with `false`).
    pub fn set_requires_grad(&self, value: bool) {
        let mut n = self.inner.borrow_mut();
        assert!(
            n.parents.is_empty(),
            "requires_grad can only be toggled on leaf tensors"
        );
        n.requires_grad = value;
    }

    /// Builder-style variant of [`set_requires_grad`].
    pub fn requiring_grad(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn grad_ref(&self) -> Option<Ref<'_, [S]>> {
        let n = self.inner.borrow();
        if n.grad.is_some() {
            Some(Ref::map(n, |n| n.grad.as_ref().unwrap().as_slice()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().parents.is_empty()
    }

    /// Whether this tensor participates in gradient propagation.
    pub(crate) fn tracks(&self) -> bool {
        let n = self.inner.borrow();
        n.requires_grad || !n.parents.is_empty()
    }

    /// Copy of the value as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> Tensor<S> {
        let n = self.inner.borrow();
        Tensor::from_vec(&n.shape, n.data.clone())
    }

    /// Replace the buffer contents (shape must match).
    pub fn set_data(&self, values: &[S]) {
        let mut n = self.inner.borrow_mut();
        assert!(
            n.data.len() == values.len(),
            "set_data length {} does not match tensor numel {}",
            values.len(),
            n.data.len()
        );
        n.data.copy_from_slice(values);
    }

    /// Add `delta` into the gradient buffer if this tensor takes part in the
    /// graph. Tensors with `requires_grad = false` and no parents never
    /// accumulate.
    pub(crate) fn accumulate_grad(&self, delta: &[S]) {
        if !self.tracks() {
            return;
        }
        let mut n = self.inner.borrow_mut();
        debug_assert_eq!(n.data.len(), delta.len());
        let grad = n.grad.get_or_insert_with(|| vec![S::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn ptr_key(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const () as usize
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable `requires_grad` leaf; interior gradients are reset first so
    /// that repeated calls on the same graph add whole contributions.
    pub fn backward(&self) {
        {
            let n = self.inner.borrow();
            assert!(
                n.data.len() == 1,
                "backward requires a scalar loss; got shape {:?}",
                n.shape
            );
        }
        if !self.tracks() {
            return;
        }

        // Post-order DFS: every node appears after all of its parents.
        let mut topo: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            if !visited.insert(t.ptr_key()) {
                continue;
            }
            stack.push((t.clone(), true));
            let parents: Vec<Tensor<S>> = t.inner.borrow().parents.clone();
            for p in parents {
                if p.tracks() && !visited.contains(&p.ptr_key()) {
                    stack.push((p, false));
                }
            }
        }

        for node in &topo {
            if !node.is_leaf() {
                node.zero_grad();
            }
        }
        self.accumulate_grad(&[S::one()]);

        for node in topo.iter().rev() {
            let grad_out: Option<Vec<S>> = node.inner.borrow().grad.clone();
            let Some(grad_out) = grad_out else { continue };
            let n = node.inner.borrow();
            if let Some(bw) = &n.backward {
                bw(&grad_out);
            }
        }
    }
}
