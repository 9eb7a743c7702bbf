//! Dense `f64` tensors with a dynamic reverse-mode tape.
//!
//! Every operation on a tensor that requires a gradient records a [`TapeNode`]
//! holding its inputs and whatever it needs for the backward rule. Calling
//! [`Tensor::backward`] on a scalar walks that DAG once in reverse topological
//! order and accumulates gradients into the leaf tensors that asked for them.
//!
//! Tensors are reference counted handles: cloning a `Tensor` shares storage.
//! Parameters are leaves created with [`Tensor::param`]; optimizers update
//! them in place through [`Tensor::data_mut`].

mod kernels;
mod op;
mod ops;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use op::OpKind;
pub(crate) use op::TapeNode;
pub use ops::{softmax_rows, BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    tape: Option<TapeNode>,
    name: RefCell<Option<String>>,
}

/// Handle to an n-dimensional row-major array of `f64`.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("name", &self.name())
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.op_kind())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dimension {
            op: "new",
            lhs: shape.to_vec(),
            rhs: vec![len],
        });
    }
    if shape.iter().product::<usize>() != len {
        return Err(Error::Dimension {
            op: "new",
            lhs: shape.to_vec(),
            rhs: vec![len],
        });
    }
    Ok(())
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, tape: Option<TapeNode>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                tape,
                name: RefCell::new(None),
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value], false, None)
    }

    /// Vector `[len]`.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(&[values.len()], values.to_vec())
    }

    /// Matrix from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    /// Attach a name used in error messages and parameter listings.
    pub fn named(self, name: impl Into<String>) -> Self {
        *self.node.name.borrow_mut() = Some(name.into());
        self
    }

    pub fn name(&self) -> String {
        self.node.name.borrow().clone().unwrap_or_else(|| "<unnamed>".to_string())
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    /// Mutable access to the values. Intended for optimizers acting on leaves;
    /// mutating a tensor that is an input to a live tape invalidates it.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values with no tape and no gradient.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.node.shape.clone(), self.to_vec(), false, None)
    }

    /// Kind of operation that produced this tensor, `None` for leaves and
    /// untaped results.
    pub fn op_kind(&self) -> Option<OpKind> {
        self.node.tape.as_ref().map(TapeNode::kind)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Build an op result. The tape node is recorded only if some input
    /// requires a gradient.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, tape: TapeNode) -> Tensor {
        let requires_grad = tape.inputs().iter().any(|t| t.requires_grad());
        let tape = if requires_grad { Some(tape) } else { None };
        Self::from_parts(shape, data, requires_grad, tape)
    }

    /// Nodes reachable from `self` through gradient-carrying edges, in
    /// topological order (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(tape) = &t.node.tape {
                for input in tape.inputs().iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.key()) {
                        stack.push(((*input).clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            match &t.node.tape {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(tape) => {
                    for (input, ig) in tape.backward(t, &g) {
                        match pending.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.key(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of distinct taped nodes reachable from this tensor.
    pub fn tape_len(&self) -> usize {
        self.topo_order().iter().filter(|t| t.node.tape.is_some()).count()
    }
}
