use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use super::{numel, Result, Tensor};

struct ParamInner {
    name: String,
    tensor: Tensor,
    frozen: Cell<bool>,
}

/// A named trainable leaf. Clones share storage, so a parameter used in two
/// places is one parameter.
#[derive(Clone)]
pub struct Parameter(Rc<ParamInner>);

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.0.name)
            .field("shape", &self.shape())
            .field("frozen", &self.is_frozen())
            .finish()
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Parameter> {
        Ok(Parameter(Rc::new(ParamInner {
            name: name.into(),
            tensor: Tensor::variable(shape, data)?,
            frozen: Cell::new(false),
        })))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Result<Parameter> {
        Self::new(name, shape, vec![0.0; numel(shape)])
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Result<Parameter> {
        Self::new(name, shape, vec![1.0; numel(shape)])
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<Parameter> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..numel(shape))
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(name, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.0.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.tensor.numel()
    }

    pub fn is_frozen(&self) -> bool {
        self.0.frozen.get()
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.0.frozen.set(frozen);
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.tensor.to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.tensor.grad()
    }

    pub fn zero_grad(&self) {
        self.0.tensor.zero_grad();
    }

    /// Overwrite the values; the length must match.
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(super::TensorError::DataLength {
                shape: self.shape().to_vec(),
                expected: self.numel(),
                actual: values.len(),
            });
        }
        self.0.tensor.update_leaf(|d| d.copy_from_slice(values))
    }

    pub fn same_storage(&self, other: &Parameter) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}
