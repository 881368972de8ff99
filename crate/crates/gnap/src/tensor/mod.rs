//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The differentiation graph is implicit: every operation returns a fresh
//! tensor holding an [`Op`] record with handles to its inputs, and
//! [`Tensor::backward`] walks that DAG in reverse topological order.
//! Handles are reference-counted, so cloning a `Tensor` shares the node;
//! use [`Tensor::deep_clone`] for an independent copy.
//!
//! All reductions run in a fixed summation order regardless of thread
//! count, so forward and backward are bit-reproducible for a given seed.

mod backward;
mod ops;

pub use ops::{
    concat_channels, conv2d, gate_sample, global_avg_pool, linear, pool2d,
    softmax_cross_entropy, PoolMode,
};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("convolution kernel must be square with odd size, got {0}x{1}")]
    BadKernel(usize, usize),
    #[error(
        "conv output size is not a positive integer: input {h}x{w}, kernel {k}, \
         stride {stride}, padding {padding}"
    )]
    BadConvGeometry {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    #[error("pool window must be >= 1, got {0}")]
    BadPoolWindow(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("operands of one operation alias the same tensor")]
    AliasedOperands,
    #[error("values length {got} does not match shape product {want}")]
    BadLength { got: usize, want: usize },
}

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// While alive, operations record no graph and their outputs require no
/// gradients. Used for deterministic inference over frozen parameters.
pub struct NoGradGuard {
    previous: bool,
}

pub fn no_grad() -> NoGradGuard {
    let previous = NO_GRAD.with(|flag| flag.replace(true));
    NoGradGuard { previous }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let previous = self.previous;
        NO_GRAD.with(|flag| flag.set(previous));
    }
}

pub(crate) fn grad_enabled() -> bool {
    !NO_GRAD.with(|flag| flag.get())
}

pub(crate) struct TensorData<S: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub grad: Option<Vec<S>>,
    pub requires_grad: bool,
    pub op: Option<ops::Op<S>>,
    pub id: u64,
}

/// Handle to one node of the differentiation graph.
pub struct Tensor<S: Scalar>(Rc<RefCell<TensorData<S>>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data();
        f.debug_struct("Tensor")
            .field("id", &d.id)
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn from_data(data: TensorData<S>) -> Self {
        Tensor(Rc::new(RefCell::new(data)))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: Vec<usize>, values: Vec<S>) -> Result<Self, TensorError> {
        let want: usize = shape.iter().product();
        if values.len() != want {
            return Err(TensorError::BadLength {
                got: values.len(),
                want,
            });
        }
        Ok(Tensor::from_data(TensorData {
            shape,
            values,
            grad: None,
            requires_grad: false,
            op: None,
            id: fresh_id(),
        }))
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, values: Vec<S>) -> Result<Self, TensorError> {
        let t = Tensor::from_vec(shape, values)?;
        t.0.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![S::zero(); n]).expect("consistent length")
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_vec(vec![], vec![value]).expect("scalar")
    }

    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<S>, op: ops::Op<S>) -> Self {
        let requires_grad = grad_enabled() && op.any_input_requires_grad();
        Tensor::from_data(TensorData {
            shape,
            values,
            grad: None,
            requires_grad,
            // Graphless nodes cost nothing to keep; drop the record when no
            // gradient can flow so eval-mode forwards retain no history.
            op: if requires_grad { Some(op) } else { None },
            id: fresh_id(),
        })
    }

    pub(crate) fn data(&self) -> Ref<'_, TensorData<S>> {
        self.0.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, TensorData<S>> {
        self.0.borrow_mut()
    }

    pub(crate) fn ptr_eq(&self, other: &Tensor<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn id(&self) -> u64 {
        self.data().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.data().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.data().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.data_mut().requires_grad = flag;
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data().values.clone()
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> S {
        let d = self.data();
        assert_eq!(d.values.len(), 1, "item() on non-scalar tensor");
        d.values[0]
    }

    pub fn grad_to_vec(&self) -> Option<Vec<S>> {
        self.data().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.data_mut().grad = None;
    }

    /// Overwrite values in place (same length required).
    pub fn set_values(&self, values: &[S]) -> Result<(), TensorError> {
        let mut d = self.data_mut();
        if values.len() != d.values.len() {
            return Err(TensorError::BadLength {
                got: values.len(),
                want: d.values.len(),
            });
        }
        d.values.copy_from_slice(values);
        Ok(())
    }

    /// Nudge one element; finite-difference probes use this.
    pub fn nudge(&self, index: usize, delta: S) {
        let mut d = self.data_mut();
        d.values[index] += delta;
    }

    pub fn value_at(&self, index: usize) -> S {
        self.data().values[index]
    }

    /// Independent leaf copy of the values; no graph history, keeps the
    /// requires-grad flag.
    pub fn deep_clone(&self) -> Tensor<S> {
        let d = self.data();
        Tensor::from_data(TensorData {
            shape: d.shape.clone(),
            values: d.values.clone(),
            grad: None,
            requires_grad: d.requires_grad,
            op: None,
            id: fresh_id(),
        })
    }

    /// Leaf copy detached from any graph and from gradients.
    pub fn detach(&self) -> Tensor<S> {
        let d = self.data();
        Tensor::from_data(TensorData {
            shape: d.shape.clone(),
            values: d.values.clone(),
            grad: None,
            requires_grad: false,
            op: None,
            id: fresh_id(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data().values.iter().all(|v| v.is_finite())
    }

    pub fn grad_all_finite(&self) -> bool {
        match &self.data().grad {
            Some(g) => g.iter().all(|v| v.is_finite()),
            None => true,
        }
    }
}

pub(crate) fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(), TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch(format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}
