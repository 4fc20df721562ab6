//! Dense f64 tensors with reverse-mode differentiation.
//!
//! The graph is dynamic: every operation allocates a new tensor that records
//! its inputs and a backward rule, and `backward` on a scalar walks the graph
//! once in reverse topological order. Calling `backward` again on the same
//! graph without zeroing accumulates (doubles) gradients; that is the
//! documented contract, matching how gradients from shared parameters sum.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

mod checkpoint;
mod conv;
mod elementwise;
mod loss_ops;
pub mod optim;
mod shape_ops;

pub use checkpoint::{
    load_checkpoint, restore_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
};
pub use conv::InterpMode;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("{op}: invalid argument: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("backward requires a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name:?} has no gradient; run backward first")]
    MissingGrad { name: String },
    #[error("kernel {kernel:?} does not fit input {input:?} with padding {padding:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
        padding: Vec<usize>,
    },
}

/// Backward rule: (output gradient, output data, inputs) -> accumulate into
/// each input's gradient buffer.
type BackwardRule = Box<dyn Fn(&[f64], &[f64], &[Tensor])>;

struct Node {
    inputs: Vec<Tensor>,
    rule: BackwardRule,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<Node>,
    requires_grad: bool,
}

/// Dense row-major tensor. Cloning is cheap (shared storage).
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

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                node: None,
                requires_grad: false,
            }),
        }
    }

    /// Leaf that participates in differentiation (parameter storage).
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                node: None,
                requires_grad: true,
            }),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        rule: BackwardRule,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = if requires_grad {
            Some(Node { inputs, rule })
        } else {
            None
        };
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                node,
                requires_grad,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy: same values, no graph, no gradient requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.inner.shape.clone(), self.value())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Get-or-create the gradient buffer and let `f` scatter into it.
    pub(crate) fn with_grad_buf(&self, f: impl FnOnce(&mut [f64])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let n = self.len();
        let buf = slot.get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable leaf with `requires_grad`; running backward again on the
    /// same graph doubles them. Interior node gradients are scratch space
    /// and reset at the start of every sweep.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    let key = Rc::as_ptr(&t.inner) as usize;
                    if !visited.insert(key) {
                        continue;
                    }
                    if let Some(node) = &t.inner.node {
                        stack.push(Frame::Exit(t.clone()));
                        for input in &node.inputs {
                            stack.push(Frame::Enter(input.clone()));
                        }
                    } else {
                        order.push(t);
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        for t in &order {
            if t.inner.node.is_some() {
                t.zero_grad();
            }
        }
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(node) = &t.inner.node else { continue };
            let grad_ref = t.inner.grad.borrow();
            let Some(grad_out) = grad_ref.as_ref() else {
                continue;
            };
            let data_ref = t.inner.data.borrow();
            (node.rule)(grad_out, &data_ref, &node.inputs);
        }
        Ok(())
    }

    /// Row-major strides for this shape.
    pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        strides
    }

    pub(crate) fn check_same_shape(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<(), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Named trainable storage. Sharing a parameter across branches means using
/// the same underlying tensor; gradient contributions sum automatically.
#[derive(Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub name: String,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Parameter {
            tensor: Tensor::leaf(shape, data),
            name: name.into(),
            trainable: true,
        }
    }

    pub fn grad_norm(&self) -> f64 {
        match self.tensor.grad() {
            Some(g) => g.iter().map(|x| x * x).sum::<f64>().sqrt(),
            None => 0.0,
        }
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.tensor.shape())
            .finish()
    }
}
