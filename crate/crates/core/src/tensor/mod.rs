//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a flat `Vec<f64>` plus a shape, wrapped in a shared node
//! that remembers the operation that produced it. Executing ops builds an
//! implicit tape (node ids are allocation-ordered), and [`Tensor::backward`]
//! replays the reachable record in exact reverse order.

mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::BnMode;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Operation record: which op produced a node, with the operands and any
/// saved activations its backward rule needs.
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Tensor,
        /// Flat input index of the window winner, per output cell.
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Tensor,
        kernel: usize,
        stride: usize,
    },
    Relu {
        input: Tensor,
    },
    Add {
        lhs: Tensor,
        rhs: Tensor,
    },
    Sub {
        lhs: Tensor,
        rhs: Tensor,
    },
    Mul {
        lhs: Tensor,
        rhs: Tensor,
    },
    Scale {
        input: Tensor,
        factor: f64,
    },
    Sum {
        input: Tensor,
    },
    Reshape {
        input: Tensor,
    },
    BatchNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        /// Normalized activations, saved for the gamma/input rules.
        xhat: Vec<f64>,
        /// Per-channel 1/sqrt(var + eps).
        inv_std: Vec<f64>,
        /// True when batch statistics were used (full backward formula).
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Tensor,
        label: usize,
        softmax: Vec<f64>,
    },
}

pub(crate) struct NodeData {
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub data: RefCell<NodeData>,
    pub op: Op,
}

/// Shared handle to a graph node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id, self.node.shape, self.node.requires_grad
        )
    }
}

impl Tensor {
    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                requires_grad,
                data: RefCell::new(NodeData { values, grad: None }),
                op,
            }),
        }
    }

    /// Leaf tensor that does not track gradients (inputs, constants).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(Tensor::from_op(shape.to_vec(), values, false, Op::Leaf))
    }

    /// Leaf tensor that accumulates gradients (trainable parameter).
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(Tensor::from_op(shape.to_vec(), values, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![0.0; n], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![value; n], false, Op::Leaf)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_op(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow of the flat value buffer.
    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.data.borrow(), |d| d.values.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().values.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data.borrow().values[0])
    }

    /// Borrow of the gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<Ref<'_, [f64]>> {
        Ref::filter_map(self.node.data.borrow(), |d| d.grad.as_deref()).ok()
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.node.data.borrow().grad.clone()
    }

    /// Gradient buffer, treating "never touched by backward" as zeros.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad_vec().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        self.node.data.borrow_mut().grad = None;
    }

    /// Overwrite values in place (optimizer updates, test fixtures).
    pub fn set_values(&self, new: &[f64]) -> Result<()> {
        if new.len() != self.len() {
            return Err(Error::Dimension(format!(
                "set_values: expected {} elements, got {}",
                self.len(),
                new.len()
            )));
        }
        self.node.data.borrow_mut().values.copy_from_slice(new);
        Ok(())
    }

    /// Mutate values in place.
    pub fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.node.data.borrow_mut().values);
    }

    pub fn all_finite(&self) -> bool {
        let d = self.node.data.borrow();
        d.values.iter().all(|v| v.is_finite())
            && d.grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let len = self.len();
        let mut d = self.node.data.borrow_mut();
        let g = d.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn op_parents(&self) -> Vec<Tensor> {
        match &self.node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::MaxPool2d { input, .. }
            | Op::AvgPool2d { input, .. }
            | Op::Relu { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Reshape { input } => vec![input.clone()],
            Op::Add { lhs, rhs } | Op::Sub { lhs, rhs } | Op::Mul { lhs, rhs } => {
                vec![lhs.clone(), rhs.clone()]
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input.clone(), gamma.clone(), beta.clone()],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }

    /// Reverse-mode pass. Populates `grad` on every `requires_grad` tensor
    /// reachable from this scalar. Calling it twice on the same node is an
    /// error; build a fresh graph (or `zero_grad` the loss) first.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.node.data.borrow().grad.is_some() {
            return Err(Error::Contract(
                "backward already ran on this node; reset the graph first".into(),
            ));
        }
        self.accumulate_grad(&[1.0]);
        if !self.node.requires_grad {
            return Ok(());
        }

        // Gather nodes that can influence a parameter, then sweep them in
        // reverse allocation order (= reverse execution order).
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        seen.insert(self.node.id);
        let mut order: Vec<Tensor> = vec![self.clone()];
        while let Some(t) = stack.pop() {
            for p in t.op_parents() {
                if p.node.requires_grad && seen.insert(p.node.id) {
                    stack.push(p.clone());
                    order.push(p);
                }
            }
        }
        order.sort_unstable_by(|a, b| b.node.id.cmp(&a.node.id));

        for t in &order {
            if t.node.data.borrow().grad.is_some() {
                ops::backward_step(t);
            }
        }
        Ok(())
    }
}
