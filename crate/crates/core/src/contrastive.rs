//! Stochastic view augmentation and the normalized temperature-scaled
//! cross-entropy (NT-Xent) loss.
//!
//! Rows `2k` and `2k+1` of a latent batch are the two views of image `k`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_dims, resize_region, Region};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
/// Added to self-similarities so they vanish from the softmax denominator.
const SELF_MASK: f32 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Fraction of the source area kept by the random crop.
    pub crop_scale: (f64, f64),
    pub output_size: (usize, usize),
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub flip_prob: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn new(output_size: (usize, usize), seed: u64) -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            output_size,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            flip_prob: 0.5,
            seed,
        }
    }

    /// Crop and resize only; every other transform disabled.
    pub fn identity(output_size: (usize, usize), seed: u64) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            flip_prob: 0.0,
            ..Self::new(output_size, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range must satisfy 0 < min <= max <= 1, got {:?}", self.crop_scale)));
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("{name} strength must lie in [0, 1], got {s}")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability must lie in [0, 1], got {}", self.flip_prob)));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Config("augmentation output size must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(r: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.gen::<f64>()
}

/// Applies brightness shift, contrast scaling about the image mean, and
/// saturation blending with per-pixel luma, in that order, then clamps.
/// A factor of exactly 1 (or a shift of 0) leaves the image untouched.
pub fn apply_jitter(img: &mut Tensor, brightness: f32, contrast: f32, saturation: f32) {
    let data = img.data_mut();
    if brightness != 0.0 {
        data.iter_mut().for_each(|v| *v += brightness);
    }
    if contrast != 1.0 {
        let mean = (data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64) as f32;
        data.iter_mut().for_each(|v| *v = mean + contrast * (*v - mean));
    }
    if saturation != 1.0 {
        for px in data.chunks_exact_mut(3) {
            let luma = px[0] * LUMA[0] + px[1] * LUMA[1] + px[2] * LUMA[2];
            px.iter_mut().for_each(|v| *v = luma + saturation * (*v - luma));
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// One random view of `image`. Draw order: crop scale, log-aspect, top,
/// left, flip, brightness, contrast, saturation.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, r: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    let (h, w) = image_dims(image)?;
    let area = (h * w) as f64;
    let target = uniform(r, cfg.crop_scale.0, cfg.crop_scale.1) * area;
    // aspect = width / height, restricted so the crop fits the image
    let lo = (3.0f64 / 4.0).max(target / (h * h) as f64);
    let hi = (4.0f64 / 3.0).min((w * w) as f64 / target);
    let t: f64 = r.gen();
    let aspect = if lo <= hi {
        (lo.ln() + (hi.ln() - lo.ln()) * t).exp()
    } else {
        w as f64 / h as f64
    };
    let ch = ((target / aspect).sqrt().round() as usize).clamp(1, h);
    let cw = ((target * aspect).sqrt().round() as usize).clamp(1, w);
    let top = (r.gen::<f64>() * (h - ch + 1) as f64) as usize;
    let left = (r.gen::<f64>() * (w - cw + 1) as f64) as usize;
    let flip = r.gen::<f64>() < cfg.flip_prob;
    let brightness = (cfg.brightness as f64 * uniform(r, -1.0, 1.0)) as f32;
    let contrast = (1.0 + cfg.contrast as f64 * uniform(r, -1.0, 1.0)) as f32;
    let saturation = (1.0 + cfg.saturation as f64 * uniform(r, -1.0, 1.0)) as f32;

    let region = Region {
        top: top.min(h - ch),
        left: left.min(w - cw),
        height: ch,
        width: cw,
    };
    let (oh, ow) = cfg.output_size;
    let mut out = resize_region(image, region, oh, ow)?;
    if flip {
        for row in out.data_mut().chunks_exact_mut(ow * 3) {
            for x in 0..ow / 2 {
                for c in 0..3 {
                    row.swap(x * 3 + c, (ow - 1 - x) * 3 + c);
                }
            }
        }
    }
    apply_jitter(&mut out, brightness, contrast, saturation);
    Ok(out)
}

/// Both views of image `index` in `epoch`, drawn from a stream that depends
/// only on `(cfg.seed, epoch, index)`.
pub fn augment_pair(image: &Tensor, cfg: &AugmentConfig, epoch: usize, index: usize) -> Result<(Tensor, Tensor)> {
    let mut r = rng::stream(cfg.seed, &[epoch as u64, index as u64]);
    Ok((augment(image, cfg, &mut r)?, augment(image, cfg, &mut r)?))
}

pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Data(format!("vector lengths differ: {} vs {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// A `(2N, dim)` latent batch with its temperature.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub z: Tensor,
    pub tau: f32,
}

impl ContrastiveBatch {
    pub fn new(z: Tensor, tau: f32) -> Result<Self> {
        check_batch(z.shape(), tau)?;
        Ok(Self { z, tau })
    }

    pub fn loss(&self) -> Result<f32> {
        let mut g = Graph::new();
        let z = g.leaf_ref(&self.z);
        let l = nt_xent(&mut g, z, self.tau)?;
        Ok(g.value(l).item())
    }
}

fn check_batch(shape: &[usize], tau: f32) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    match shape {
        &[rows, _] if rows >= 2 && rows % 2 == 0 => Ok(()),
        s => Err(Error::Data(format!("contrastive batch needs an even number of rows >= 2, got shape {s:?}"))),
    }
}

/// Mean over all `2N` directed positive pairs of
/// `-log(exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau))`, with cosine
/// similarities `s`. Built from differentiable graph ops.
pub fn nt_xent(g: &mut Graph<'_>, z: Var, tau: f32) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    check_batch(&shape, tau)?;
    let (rows, dim) = (shape[0], shape[1]);

    let sq = g.mul(z, z)?;
    let sumsq = g.sum(sq, Some(1))?;
    let log_sq = g.log(sumsq).map_err(|_| Error::Numeric("zero latent vector in contrastive batch".into()))?;
    let half = g.scale(log_sq, -0.5);
    let inv_norm = g.exp(half);
    let ones_d = g.constant(Tensor::ones(&[dim])?);
    let inv_spread = g.contract(inv_norm, ones_d, &[])?;
    let zn = g.mul(z, inv_spread)?;

    let sim = g.contract(zn, zn, &[(1, 1)])?;
    let logits = g.scale(sim, 1.0 / tau);
    let mut mask = vec![0.0f32; rows * rows];
    let mut positives = vec![0.0f32; rows * rows];
    for i in 0..rows {
        mask[i * rows + i] = SELF_MASK;
        positives[i * rows + (i ^ 1)] = 1.0;
    }
    let mask = g.constant(Tensor::new(&[rows, rows], mask)?);
    let logits = g.add(logits, mask)?;

    let row_max = g.max(logits, Some(1))?;
    let ones_r = g.constant(Tensor::ones(&[rows])?);
    let max_spread = g.contract(row_max, ones_r, &[])?;
    let shifted = g.sub(logits, max_spread)?;
    let e = g.exp(shifted);
    let denom = g.sum(e, Some(1))?;
    let lse = g.log(denom)?;
    let positives = g.constant(Tensor::new(&[rows, rows], positives)?);
    let picked = g.mul(shifted, positives)?;
    let pos = g.sum(picked, Some(1))?;
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean(per_row, None)?)
}
