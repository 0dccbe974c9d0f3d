//! Dense row-major f64 tensors and named trainable parameters.
//!
//! A tensor carries a gradient buffer iff it is marked trainable; gradients
//! accumulate additively until cleared. Parameters are shared handles so the
//! same storage can be referenced by a model, a compute graph, and an
//! optimizer without copies.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Panics if the shape does not match the element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    /// Marks the tensor trainable, attaching a zeroed gradient buffer.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer; present iff the tensor is trainable.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .as_mut()
            .expect("accumulate_grad on a tensor without a gradient buffer");
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named, shared handle to a trainable tensor. Cloning shares storage.
#[derive(Clone)]
pub struct Param {
    name: String,
    cell: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), cell: Rc::new(RefCell::new(value.trainable())) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.cell.borrow()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cell.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.cell.borrow().numel()
    }

    /// Storage identity; two handles compare equal iff they share storage.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.cell) as usize
    }

    pub fn grad_snapshot(&self) -> Vec<f64> {
        self.cell.borrow().grad().expect("parameter always has a gradient buffer").to_vec()
    }

    pub fn accumulate_grad(&self, delta: &[f64]) {
        self.cell.borrow_mut().accumulate_grad(delta);
    }

    pub fn zero_grad(&self) {
        self.cell.borrow_mut().zero_grad();
    }

    /// Replaces the stored values; shape must be unchanged.
    pub fn set_data(&self, data: &[f64]) {
        let mut t = self.cell.borrow_mut();
        assert_eq!(t.numel(), data.len(), "set_data length mismatch for {}", self.name);
        t.data_mut().copy_from_slice(data);
    }

    pub fn data_snapshot(&self) -> Vec<f64> {
        self.cell.borrow().data().to_vec()
    }

    /// Adds `delta` to one coordinate (finite-difference probes).
    pub fn nudge(&self, index: usize, delta: f64) {
        let mut t = self.cell.borrow_mut();
        t.data_mut()[index] += delta;
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.cell.borrow();
        write!(f, "Param({} {:?})", self.name, t.shape())
    }
}
