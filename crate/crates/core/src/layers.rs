//! Parameter containers for affine layers and layer normalization, and
//! their tape-bound counterparts.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x · weight + bias`, with `weight: in×out` and `bias: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(fan_in, fan_out, gain / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Tensor::identity(dim),
            bias: Tensor::zeros(1, dim),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// Plain (untaped) evaluation on a single row vector.
    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.fan_in() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: [1, x.len()],
                rhs: self.weight.shape(),
            });
        }
        let out = Tensor::row(x).matmul(&self.weight)?;
        Ok(out.data().iter().zip(self.bias.data()).map(|(a, b)| a + b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.weight)?;
        tape.add_row(xw, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::filled(1, dim, 1.0),
            beta: Tensor::zeros(1, dim),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: tape.leaf(self.gamma.clone(), trainable),
            beta: tape.leaf(self.beta.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BoundLayerNorm {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.gamma, self.beta]
    }
}
