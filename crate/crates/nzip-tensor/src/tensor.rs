//! Core tensor type and the reverse-mode tape.
//!
//! A `Tensor` is an immutable dense f64 array in row-major order. Operations
//! on tracked tensors record parent links plus a backward closure; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into the leaf tensors.
//!
//! Interior-node gradients live in a scratch table owned by the backward
//! pass, so repeated `backward()` calls accumulate leaf gradients without
//! double-counting through shared subgraphs.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled on this thread.
///
/// Ops executed inside produce plain leaves: no parents, no closures, no
/// graph memory. Used for inference paths (compress/decompress, eval).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.replace(false);
        let out = f();
        g.set(prev);
        out
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: receives the node's output gradient and accumulates
/// contributions into its parents through the sink.
pub type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Dense n-dimensional f64 tensor, row-major, cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

pub(crate) fn check_numel(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::ShapeMismatch(format!(
            "shape {shape:?} implies {n} elements, data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn new_inner(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward_fn,
            }),
        }
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_numel(shape, data.len())?;
        Ok(Self::new_inner(data, shape.to_vec(), true, Vec::new(), None))
    }

    /// Leaf tensor that never receives a gradient (inputs, constants).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_numel(shape, data.len())?;
        Ok(Self::new_inner(data, shape.to_vec(), false, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner(vec![0.0; n], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner(vec![value; n], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_inner(vec![value], vec![1], false, Vec::new(), None)
    }

    /// Leaf filled from U(lo, hi) draws in index order.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::new_inner(data, shape.to_vec(), true, Vec::new(), None)
    }

    /// Interior node produced by an operation. Tracking is dropped when
    /// gradients are disabled or no parent is tracked, so inference builds
    /// no graph.
    pub fn from_op(
        data: Vec<f64>,
        shape: &[usize],
        parents: &[&Tensor],
        backward_fn: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tracked = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !tracked {
            return Self::new_inner(data, shape.to_vec(), false, Vec::new(), None);
        }
        let parents: Vec<Tensor> = parents
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| (*p).clone())
            .collect();
        Self::new_inner(data, shape.to_vec(), true, parents, Some(backward_fn))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    /// True for leaves flagged by the user and for interior tracked nodes.
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.backward_fn.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.inner.data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant leaf with the same data, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new_inner(
            self.inner.data.clone(),
            self.inner.shape.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Same data viewed under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_numel(shape, self.numel())?;
        let data = self.inner.data.clone();
        let this = self.clone();
        Ok(Tensor::from_op(
            data,
            shape,
            &[self],
            Box::new(move |go, sink| {
                if let Some(g) = sink.entry(&this) {
                    for (gi, &v) in g.iter_mut().zip(go) {
                        *gi += v;
                    }
                }
            }),
        ))
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        if !self.requires_grad() {
            // Loss disconnected from any tracked leaf: nothing to do.
            return Ok(());
        }

        // Iterative post-order DFS over tracked parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let child = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if visited.insert(child.id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut sink = GradSink {
            bufs: HashMap::new(),
        };
        sink.bufs.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(gout) = sink.bufs.remove(&node.id()) else {
                continue; // no gradient flowed here
            };
            match &node.inner.backward_fn {
                Some(f) => f(&gout, &mut sink),
                None => {
                    // Leaf: fold the scratch gradient into persistent storage.
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&gout) {
                                *a += g;
                            }
                        }
                        None => *slot = Some(gout),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scratch gradient table used during a backward sweep.
pub struct GradSink {
    bufs: HashMap<u64, Vec<f64>>,
}

impl GradSink {
    /// Gradient buffer for `t`, or None when `t` does not take gradients.
    pub fn entry(&mut self, t: &Tensor) -> Option<&mut [f64]> {
        if !t.requires_grad() {
            return None;
        }
        Some(
            self.bufs
                .entry(t.id())
                .or_insert_with(|| vec![0.0; t.numel()])
                .as_mut_slice(),
        )
    }
}
