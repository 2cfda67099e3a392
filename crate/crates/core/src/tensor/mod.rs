//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a contiguous row-major buffer. All
//! differentiable computation goes through a [`Tape`], which records every
//! primitive operation in execution order and replays the record in reverse
//! to accumulate gradients. One tape covers one forward episode; a tape is
//! consumed by its backward pass and cannot be reused.
//!
//! Values are `f64` throughout and evaluation order is fixed, so identical
//! inputs produce bit-identical results across runs.

mod tape;

pub use tape::Tape;

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// True if this tensor was produced by a tape operation.
    node: bool,
    /// Id of the tape that produced this tensor, if any.
    tape_id: Option<u64>,
}

/// Shared handle to a dense row-major float64 buffer.
///
/// Cloning a `Tensor` clones the handle, not the buffer. Leaves are created
/// with [`Tensor::new`] (constant) or [`Tensor::param`] (trainable); nodes
/// are created by [`Tape`] operations. After a backward pass, the gradient
/// of every participating leaf with `requires_grad` is fully populated and
/// readable via [`Tensor::grad`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Parameter(format!(
            "tensor shape {shape:?} contains a zero dimension"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::Parameter(format!(
            "tensor shape {shape:?} implies {numel} elements but {data_len} were supplied"
        )));
    }
    Ok(())
}

impl Tensor {
    /// Constant leaf tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(data.len(), shape)?;
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
                node: false,
                tape_id: None,
            })),
        })
    }

    /// Trainable leaf tensor: receives a gradient on backward.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    /// Scalar constant, shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![v], &[1]).expect("scalar shape is valid")
    }

    /// All-zero constant of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape).expect("zeros shape is valid")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrow the underlying buffer.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Copy the underlying buffer out.
    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single element of a scalar tensor.
    ///
    /// Panics on non-scalar tensors; callers check [`Tensor::is_scalar`].
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(
            inner.data.len() == 1,
            "item() called on tensor of shape {:?}",
            inner.shape
        );
        inner.data[0]
    }

    /// Copy of the accumulated gradient, if one was populated by a backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Detached copy: a constant leaf with the same values and no tape
    /// identity. Gradients never flow into a detached tensor.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new(inner.data.clone(), &inner.shape).expect("detach preserves shape")
    }

    // Crate-internal access for the optimizer and the tape machinery.

    pub(crate) fn data_mut(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub(crate) fn tape_id(&self) -> Option<u64> {
        self.inner.borrow().tape_id
    }

    pub(crate) fn mark_node(&self, tape_id: u64) {
        let mut inner = self.inner.borrow_mut();
        inner.node = true;
        inner.tape_id = Some(tape_id);
    }

    /// Pointer identity key, used to deduplicate tensors during backward.
    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn participates(&self) -> bool {
        let inner = self.inner.borrow();
        inner.node || inner.requires_grad
    }

    pub(crate) fn init_zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        inner.grad = Some(vec![0.0; n]);
    }

    /// Accumulate a gradient contribution. No-op on constants.
    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !(inner.node || inner.requires_grad) {
            return;
        }
        let grad = inner
            .grad
            .as_mut()
            .expect("gradient buffer initialized before accumulation");
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Copy of the gradient buffer, zeros if absent.
    pub(crate) fn grad_or_zeros(&self) -> Vec<f64> {
        let inner = self.inner.borrow();
        match &inner.grad {
            Some(g) => g.clone(),
            None => vec![0.0; inner.data.len()],
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).is_ok());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn detach_copies_values_and_drops_grad_identity() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = p.detach();
        assert_eq!(d.value(), vec![1.0, 2.0]);
        assert!(!d.requires_grad());
        assert!(d.grad().is_none());
    }

    #[test]
    fn constant_never_accumulates() {
        let c = Tensor::new(vec![1.0], &[1]).unwrap();
        c.accumulate_grad(&[5.0]);
        assert!(c.grad().is_none());
    }
}
