//! Dense tensor kernel with reverse-mode gradients.
//!
//! Layout is NCHW throughout; values are stored flat in row-major order.
//! Every operation records its inputs so that [`Tensor::backward`] can
//! replay the graph in reverse topological order.

mod ops;
mod snapshot;

pub mod gradcheck;

pub use ops::*;
pub use snapshot::{read_snapshot, write_snapshot};

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{DeenError, Result};

/// Gradient function: given the node and the output gradient, produce one
/// gradient buffer per parent (same order as `parents`).
type BackwardFn = Box<dyn Fn(&Inner, &[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Inner {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Immutable dense array with an optional gradient slot.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], values: &[f64]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(DeenError::Dim(format!("zero-sized dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(DeenError::Dim(format!(
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            values.len()
        )));
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, &values)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                values,
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn leaf(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, &values)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                values,
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).unwrap()
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                values,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.values[0]
    }

    /// Copy of the accumulated gradient, if backward has populated it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_finite_values(&self) -> bool {
        self.inner.values.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Populates the grad
    /// slot of every tensor on the path that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(DeenError::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.values[0].is_finite() {
            return Err(DeenError::Numeric("backward() on non-finite loss".into()));
        }
        let tape = Tape::record(self);
        self.accumulate_grad(&[1.0]);
        for node in tape.nodes.iter().rev() {
            let out_grad = match node.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // unreachable from the loss
            };
            if let Some(back) = &node.inner.backward {
                let parent_grads = back(&node.inner, &out_grad);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (parent, g) in node.inner.parents.iter().zip(parent_grads) {
                    if parent.inner.requires_grad {
                        parent.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the operations reachable from a root.
/// Every node's parents precede it; one backward traversal visits each
/// node exactly once.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Tape {
        let mut nodes = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        // Iterative post-order DFS; graphs can be deep during training.
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        visited.insert(Rc::as_ptr(&root.inner));
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx < node.inner.parents.len() {
                let child = node.inner.parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                let ptr = Rc::as_ptr(&child.inner);
                if child.inner.requires_grad && visited.insert(ptr) {
                    stack.push((child, 0));
                }
            } else {
                nodes.push(node);
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
