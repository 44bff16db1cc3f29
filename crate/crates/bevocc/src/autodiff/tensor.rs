use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian-initialized tensor, Box-Muller over the supplied generator.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            data.push(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos());
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Shared handle to a tensor that survives across tapes.
///
/// Model parameters and any input that wants gradients are held as `Param`s;
/// leasing one onto a tape with [`crate::autodiff::Tape::value`] makes it a
/// leaf whose gradient is written back by `backward`.
#[derive(Debug, Clone)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    /// A trainable parameter (requires_grad = true).
    pub fn new(mut tensor: Tensor) -> Param {
        tensor.requires_grad = true;
        Param(Rc::new(RefCell::new(tensor)))
    }

    /// A shared tensor that does not request gradients.
    pub fn frozen(mut tensor: Tensor) -> Param {
        tensor.requires_grad = false;
        Param(Rc::new(RefCell::new(tensor)))
    }

    pub fn zeros(shape: Vec<usize>) -> Param {
        Param::new(Tensor::zeros(shape))
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Param {
        Param::new(Tensor::full(shape, value))
    }

    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Param {
        Param::new(Tensor::randn(shape, std, rng))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    /// Identity of the underlying allocation; two clones compare equal.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(3.5);
        assert!(t.shape().is_empty());
        assert_eq!(t.numel(), 1);
        let numel: usize = t.shape().iter().product();
        assert_eq!(numel, 1);
    }

    #[test]
    fn grad_accumulation_allocates_and_adds() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 0.0, -3.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 2.0, 0.0][..]));
    }
}
