//! Small layer building blocks on top of [`crate::tensor`].

use rand::Rng;

use crate::tensor::{Parameter, Result, Tensor};

/// Anything that owns trainable parameters.
pub trait Module {
    fn parameters(&self) -> Vec<Parameter>;
}

pub fn freeze(module: &(impl Module + ?Sized)) {
    module.parameters().iter().for_each(|p| p.set_frozen(true));
}

pub fn unfreeze(module: &(impl Module + ?Sized)) {
    module.parameters().iter().for_each(|p| p.set_frozen(false));
}

/// `x · W (+ b)` on row vectors; `x` is `(rows, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let weight = Parameter::uniform(name, &[inputs, outputs], inputs, rng)?;
        let bias = if bias {
            Some(Parameter::uniform(format!("{name}.bias"), &[outputs], inputs, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.weight.tensor())?;
        match &self.bias {
            Some(b) => y.add(b.tensor()),
            None => Ok(y),
        }
    }

    /// Apply to a single vector, returning a vector.
    pub fn forward_vec(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        self.forward(&x.reshape(&[1, n])?)?.reshape(&[self.outputs()])
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<Parameter> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }
}

/// Layer normalization over the last axis with a learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub shift: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: Parameter::ones(format!("{name}.gain"), &[width])?,
            shift: Parameter::zeros(format!("{name}.shift"), &[width])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.eps)?
            .mul(self.gain.tensor())?
            .add(self.shift.tensor())
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<Parameter> {
        vec![self.gain.clone(), self.shift.clone()]
    }
}
