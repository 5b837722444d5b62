//! Layers: plain dense, tensor-train factorized dense, and a small
//! densely connected convolutional encoder.
//!
//! Every layer exposes its parameters in a fixed order. `forward` registers
//! them on the graph by reference and appends the resulting [`Var`]s to
//! `bound` in that same order, so gradients can be routed back with
//! [`Module::store_grads`].

mod dense;
mod encoder;
mod tt;

pub use dense::{dense_forward, DenseLayer};
pub use encoder::{ConvLayer, Encoder, EncoderConfig};
pub use tt::{tt_forward, TtDenseLayer, TtSpec};

use crate::tensor::{Gradients, Graph, Result as TensorResult, Tensor, Var};

pub trait Module {
    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn forward<'t>(&'t self, g: &mut Graph<'t>, x: Var, bound: &mut Vec<Var>) -> TensorResult<Var>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn trainable(&self) -> bool {
        self.params().iter().all(|p| p.requires_grad())
    }

    fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    /// Accumulates gradients for the vars returned by `forward` into the
    /// parameter buffers.
    fn store_grads(&mut self, grads: &Gradients, bound: &[Var]) -> TensorResult<()> {
        for (p, &v) in self.params_mut().into_iter().zip(bound) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }
}

/// `x (rows, n) + broadcast(bias (n))`, with the broadcast written as an
/// outer product against a ones vector.
pub(crate) fn add_row_bias<'t>(g: &mut Graph<'t>, x: Var, bias: Var) -> TensorResult<Var> {
    let rows = g.shape(x)[..g.shape(x).len() - 1].iter().product::<usize>();
    let ones = g.constant(Tensor::ones(&[rows])?);
    let spread = g.contract(ones, bias, &[])?;
    let shape = g.shape(x).to_vec();
    let spread = g.reshape(spread, &shape)?;
    g.add(x, spread)
}
