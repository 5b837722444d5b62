//! Densely connected convolutional encoder.
//!
//! Each stage is a run of `k x k` convolutions whose outputs are concatenated
//! onto their inputs, so layer `i` of a stage sees `c0 + growth * i` channels.
//! A 2x2 average pool follows every stage and a global average pool produces
//! the feature vector. Per-channel bias plus relu replaces batch norm.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{add_row_bias, Module};
use crate::rng;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// `(num_layers, growth_channels)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    /// Two stages ending in 64 channels: `3 + 2*8 + 3*15`.
    fn default() -> Self {
        Self {
            in_channels: 3,
            stages: vec![(2, 8), (3, 15)],
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::Config(format!("encoder kernel must be odd, got {}", self.kernel)));
        }
        if self.in_channels == 0 || self.stages.iter().any(|&(l, g)| l == 0 || g == 0) {
            return Err(Error::Config(format!("encoder stages must be positive: {:?}", self.stages)));
        }
        Ok(())
    }

    pub fn feat_dim(&self) -> usize {
        self.in_channels + self.stages.iter().map(|&(l, g)| l * g).sum::<usize>()
    }

    /// Input channels of every convolution, in forward order.
    pub fn conv_inputs(&self) -> Vec<(usize, usize)> {
        let mut c = self.in_channels;
        let mut out = Vec::new();
        for &(layers, growth) in &self.stages {
            for _ in 0..layers {
                out.push((c, growth));
                c += growth;
            }
        }
        out
    }

    /// Inputs must be divisible by `2^stages` in both spatial extents.
    pub fn min_divisor(&self) -> usize {
        1 << self.stages.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `(k*k*c_in, c_out)`, rows ordered `(dy, dx, c)`.
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub convs: Vec<ConvLayer>,
}

impl Encoder {
    /// He-uniform kernels, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut convs = Vec::new();
        for (i, (c_in, growth)) in config.conv_inputs().into_iter().enumerate() {
            let fan_in = k * k * c_in;
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let mut r = rng::stream(seed, &[i as u64]);
            let data = (0..fan_in * growth).map(|_| r.gen_range(-bound..=bound)).collect();
            convs.push(ConvLayer {
                kernel: Tensor::new(&[fan_in, growth], data)?,
                bias: Tensor::zeros(&[growth])?,
            });
        }
        let mut enc = Self { config, convs };
        enc.set_trainable(true);
        Ok(enc)
    }

    pub fn from_convs(config: EncoderConfig, convs: Vec<ConvLayer>) -> crate::Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let inputs = config.conv_inputs();
        if inputs.len() != convs.len() {
            return Err(Error::Config(format!(
                "encoder config needs {} convolutions, got {}",
                inputs.len(),
                convs.len()
            )));
        }
        for ((c_in, growth), conv) in inputs.iter().zip(&convs) {
            if conv.kernel.shape() != [k * k * c_in, *growth] || conv.bias.shape() != [*growth] {
                return Err(Error::Config(format!(
                    "convolution kernel {:?} does not fit {c_in} -> {growth}",
                    conv.kernel.shape()
                )));
            }
        }
        Ok(Self { config, convs })
    }

    pub fn feat_dim(&self) -> usize {
        self.config.feat_dim()
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Tensor> {
        self.convs.iter().flat_map(|c| [&c.kernel, &c.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs.iter_mut().flat_map(|c| [&mut c.kernel, &mut c.bias]).collect()
    }

    /// `(batch, H, W, C) -> (batch, feat_dim)`.
    fn forward<'t>(&'t self, g: &mut Graph<'t>, x: Var, bound: &mut Vec<Var>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let div = self.config.min_divisor();
        if shape.len() != 4 || shape[3] != self.config.in_channels {
            return Err(TensorError::ShapeMismatch(format!(
                "encoder expects (batch, H, W, {}), got {shape:?}",
                self.config.in_channels
            )));
        }
        if !shape[1].is_multiple_of(div) || !shape[2].is_multiple_of(div) {
            return Err(TensorError::Invalid(format!(
                "image extent {}x{} is not divisible by {div}",
                shape[1], shape[2]
            )));
        }
        let k = self.config.kernel;
        let mut convs = self.convs.iter();
        let mut h = x;
        for &(layers, _) in &self.config.stages {
            for _ in 0..layers {
                let conv = convs.next().expect("conv count checked at construction");
                let w = g.leaf_ref(&conv.kernel);
                let b = g.leaf_ref(&conv.bias);
                bound.extend([w, b]);
                let p = g.patches(h, k)?;
                let y = g.contract(p, w, &[(3, 0)])?;
                let y = add_row_bias(g, y, b)?;
                let y = g.relu(y);
                h = g.concat(&[h, y], 3)?;
            }
            h = g.avg_pool2(h)?;
        }
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2], s[3]])?;
        g.mean(flat, Some(1))
    }
}
