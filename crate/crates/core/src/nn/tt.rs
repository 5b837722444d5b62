//! Tensor-train factorized dense layer.
//!
//! The `(a*b) x (c*d)` weight matrix is replaced by two rank-3 cores joined by
//! a bond index of size `r`:
//!
//! ```text
//! W[(i, j), (k, l)] = sum_s core1[i, k, s] * core2[j, l, s]
//! ```
//!
//! with `core1: (a, c, r)` and `core2: (b, d, r)`. The forward pass never
//! materializes `W`; it reshapes each input row to `(a, b)`, contracts the
//! `a` index against `core1`, then the `(b, r)` pair against `core2`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{add_row_bias, Module};
use crate::rng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use crate::Error;

/// Factorization plan: input split `a x b`, output split `c x d`, bond `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TtSpec {
    pub in_split: (usize, usize),
    pub out_split: (usize, usize),
    pub bond: usize,
}

impl TtSpec {
    pub fn new(in_split: (usize, usize), out_split: (usize, usize), bond: usize) -> crate::Result<Self> {
        let spec = Self {
            in_split,
            out_split,
            bond,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let (a, b) = self.in_split;
        let (c, d) = self.out_split;
        if [a, b, c, d, self.bond].contains(&0) {
            return Err(Error::Config(format!("TT spec entries must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Checks the splits against the layer dimensions they must factor.
    pub fn check_dims(&self, in_dim: usize, out_dim: usize) -> crate::Result<()> {
        self.validate()?;
        let (a, b) = self.in_split;
        let (c, d) = self.out_split;
        if a * b != in_dim {
            return Err(Error::IndivisibleSplit(format!(
                "input split {a}x{b} does not factor in_dim {in_dim}"
            )));
        }
        if c * d != out_dim {
            return Err(Error::IndivisibleSplit(format!(
                "output split {c}x{d} does not factor out_dim {out_dim}"
            )));
        }
        Ok(())
    }

    /// Picks the most balanced split `(p, q)`, `p <= q`, with `p * q == n`.
    pub fn balanced_split(n: usize) -> (usize, usize) {
        let mut p = (n as f64).sqrt() as usize;
        while p > 1 && !n.is_multiple_of(p) {
            p -= 1;
        }
        let p = p.max(1);
        (p, n / p)
    }

    pub fn in_dim(&self) -> usize {
        self.in_split.0 * self.in_split.1
    }

    pub fn out_dim(&self) -> usize {
        self.out_split.0 * self.out_split.1
    }

    /// Entries of both cores, `a*c*r + b*d*r`.
    pub fn core_params(&self) -> usize {
        let (a, b) = self.in_split;
        let (c, d) = self.out_split;
        (a * c + b * d) * self.bond
    }

    /// Multiply-adds per sample of the forward contraction, `a*b*c*r + b*c*d*r`.
    pub fn forward_macs(&self) -> usize {
        let (a, b) = self.in_split;
        let (c, d) = self.out_split;
        a * b * c * self.bond + b * c * d * self.bond
    }

    /// Half-width of the uniform core initialization.
    ///
    /// Chosen so that the variance of a materialized entry,
    /// `r * (s^2 / 3)^2`, equals the Glorot-uniform variance `2 / (in + out)`
    /// for every bond size.
    pub fn init_bound(&self) -> f64 {
        let glorot_var = 2.0 / (self.in_dim() + self.out_dim()) as f64;
        (9.0 * glorot_var / self.bond as f64).powf(0.25)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtDenseLayer {
    pub spec: TtSpec,
    pub core1: Tensor,
    pub core2: Tensor,
    pub bias: Tensor,
}

impl TtDenseLayer {
    pub fn from_cores(spec: TtSpec, core1: Tensor, core2: Tensor, bias: Tensor) -> crate::Result<Self> {
        spec.validate()?;
        let (a, b) = spec.in_split;
        let (c, d) = spec.out_split;
        let r = spec.bond;
        if core1.shape() != [a, c, r] || core2.shape() != [b, d, r] || bias.shape() != [c * d] {
            return Err(TensorError::ShapeMismatch(format!(
                "TT cores {:?}/{:?} and bias {:?} do not fit {spec:?}",
                core1.shape(),
                core2.shape(),
                bias.shape()
            ))
            .into());
        }
        let mut layer = Self {
            spec,
            core1,
            core2,
            bias,
        };
        layer.set_trainable(true);
        Ok(layer)
    }

    /// Cores i.i.d. uniform in `[-s, s]` (see [`TtSpec::init_bound`]), zero bias.
    pub fn init(spec: TtSpec, seed: u64) -> crate::Result<Self> {
        spec.validate()?;
        let (a, b) = spec.in_split;
        let (c, d) = spec.out_split;
        let r = spec.bond;
        let s = spec.init_bound() as f32;
        let mut rng = rng::stream(seed, &[]);
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-s..=s)).collect() };
        let core1 = Tensor::new(&[a, c, r], draw(a * c * r))?;
        let core2 = Tensor::new(&[b, d, r], draw(b * d * r))?;
        Self::from_cores(spec, core1, core2, Tensor::zeros(&[c * d])?)
    }

    /// Weight parameters only (bias excluded).
    pub fn weight_params(&self) -> usize {
        self.core1.numel() + self.core2.numel()
    }

    /// Contracts the cores into the full `(a*b, c*d)` matrix.
    pub fn materialize(&self) -> Tensor {
        let (a, b) = self.spec.in_split;
        let (c, d) = self.spec.out_split;
        let r = self.spec.bond;
        let (g1, g2) = (self.core1.data(), self.core2.data());
        let mut w = vec![0.0f32; a * b * c * d];
        for i in 0..a {
            for j in 0..b {
                let row = (i * b + j) * c * d;
                for k in 0..c {
                    let u = &g1[(i * c + k) * r..(i * c + k + 1) * r];
                    for l in 0..d {
                        let v = &g2[(j * d + l) * r..(j * d + l + 1) * r];
                        let s: f64 = u.iter().zip(v).map(|(&p, &q)| p as f64 * q as f64).sum();
                        w[row + k * d + l] = s as f32;
                    }
                }
            }
        }
        Tensor::new(&[a * b, c * d], w).expect("materialized shape")
    }
}

impl Module for TtDenseLayer {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.core1, &self.core2, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.core1, &mut self.core2, &mut self.bias]
    }

    fn forward<'t>(&'t self, g: &mut Graph<'t>, x: Var, bound: &mut Vec<Var>) -> Result<Var> {
        let (a, b) = self.spec.in_split;
        let (c, d) = self.spec.out_split;
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != a * b {
            return Err(TensorError::ShapeMismatch(format!(
                "TT layer expects (batch, {}), got {:?}",
                a * b,
                shape
            )));
        }
        let batch = shape[0];
        let g1 = g.leaf_ref(&self.core1);
        let g2 = g.leaf_ref(&self.core2);
        let bias = g.leaf_ref(&self.bias);
        bound.extend([g1, g2, bias]);
        let x3 = g.reshape(x, &[batch, a, b])?;
        // (batch, a, b) x (a, c, r) -> (batch, b, c, r)
        let t = g.contract(x3, g1, &[(1, 0)])?;
        // (batch, b, c, r) x (b, d, r) -> (batch, c, d)
        let y = g.contract(t, g2, &[(1, 0), (3, 2)])?;
        let y = g.reshape(y, &[batch, c * d])?;
        add_row_bias(g, y, bias)
    }
}

/// One-shot factorized forward on a plain tensor.
pub fn tt_forward(layer: &TtDenseLayer, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, xv, &mut Vec::new())?;
    Ok(g.value(y).clone())
}
