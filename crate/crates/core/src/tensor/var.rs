use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
///
/// Receives the gradient of the operation's output, the parent variables and
/// the output value; returns one gradient per parent (`None` when a parent
/// does not need one).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[Var<T>], &Tensor<T>) -> Vec<Option<Vec<T>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard drops.
pub fn no_grad() -> GradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(false));
    GradGuard { previous }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub struct GradGuard {
    previous: bool,
}

impl Drop for GradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    grad: Mutex<Option<Vec<T>>>,
}

/// A tensor participating in the computation graph.
///
/// Cloning is cheap (shared handle). Values are immutable once created; only
/// the accumulated gradient of a leaf changes.
pub struct Var<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    fn make(
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Var(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
            grad: Mutex::new(None),
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    /// A leaf whose gradient is accumulated by [`backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::make(value, true, parents, Some(backward))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let g = self.0.grad.lock().expect("grad lock");
        g.as_ref()
            .map(|g| Tensor::new(self.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn accumulate(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Reverse-mode sweep from a scalar loss.
///
/// Every reachable leaf created with [`Var::leaf`] has `∂loss/∂leaf` added to
/// its gradient buffer.
pub fn backward<T: Scalar>(loss: &Var<T>) -> Result<()> {
    if loss.value().len() != 1 {
        return Err(Error::contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Ok(());
    }

    // Iterative post-order DFS gives a topological order (parents first).
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var<T>, usize)> = vec![(loss.clone(), 0)];
    seen.insert(loss.id());
    while let Some((node, next)) = stack.pop() {
        if next < node.0.parents.len() {
            let parent = node.0.parents[next].clone();
            stack.push((node, next + 1));
            if parent.requires_grad() && seen.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::one()]);
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        match &node.0.backward {
            None => node.accumulate(&g),
            Some(f) => {
                let parent_grads = f(&g, &node.0.parents, &node.0.value);
                assert_eq!(parent_grads.len(), node.0.parents.len());
                for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    assert_eq!(pg.len(), parent.value().len());
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(pg) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
