use rand::Rng as _;

use super::{add_row_bias, Module};
use crate::rng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// `y = x W + b` with `W` stored as `(in_dim, out_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(TensorError::ShapeMismatch(format!(
                "dense weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        let mut layer = Self { weight, bias };
        layer.set_trainable(true);
        Ok(layer)
    }

    /// Glorot-uniform weight, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt() as f32;
        let mut r = rng::stream(seed, &[]);
        let data = (0..in_dim * out_dim).map(|_| r.gen_range(-bound..=bound)).collect();
        Self::new(Tensor::new(&[in_dim, out_dim], data)?, Tensor::zeros(&[out_dim])?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for DenseLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn forward<'t>(&'t self, g: &mut Graph<'t>, x: Var, bound: &mut Vec<Var>) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(TensorError::ShapeMismatch(format!(
                "dense layer expects (batch, {}), got {:?}",
                self.in_dim(),
                shape
            )));
        }
        let w = g.leaf_ref(&self.weight);
        let b = g.leaf_ref(&self.bias);
        bound.extend([w, b]);
        let y = g.contract(x, w, &[(1, 0)])?;
        add_row_bias(g, y, b)
    }
}

/// One-shot dense forward on a plain tensor.
pub fn dense_forward(layer: &DenseLayer, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, xv, &mut Vec::new())?;
    Ok(g.value(y).clone())
}
