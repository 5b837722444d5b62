//! Procedural stand-in corpus: per-class color bias plus an oriented sinusoid
//! at a class-specific spatial frequency, with seeded noise.

use std::fs;
use std::path::Path;

use rand::Rng as _;

use super::{encode_ppm, CLASSES};
use crate::tensor::Tensor;
use crate::{rng, Error, Result};

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One image of class `class`, drawn from stream `(seed, class, index)`.
pub(crate) fn synth_image(class: usize, index: usize, size: usize, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, &[class as u64, index as u64]);
    let base = hsv_to_rgb(class as f32 / CLASSES.len() as f32, 0.45, 0.75);
    let freq = 1.0 + class as f32;
    let angle = class as f32 * 0.7 + r.gen_range(-0.15..0.15);
    let phase = r.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 * ca + y as f32 * sa) / size as f32;
            let wave = 0.2 * (std::f32::consts::TAU * freq * u + phase).sin();
            for &b in &base {
                let noise: f32 = r.gen_range(-0.05..0.05);
                data.push((b + wave + noise).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Tensor::new(&[size, size, 3], data)?)
}

/// Writes `per_class` PPM images per class as `<out>/<Abbrev>/<abbrev>_NNNN.ppm`.
/// Returns the number of files written.
pub fn gen_synthetic(out: &Path, per_class: usize, size: usize, seed: u64) -> Result<usize> {
    if size < 8 {
        return Err(Error::Config(format!("synthetic image size must be at least 8, got {size}")));
    }
    let mut written = 0;
    for (c, &(_, abbrev)) in CLASSES.iter().enumerate() {
        let dir = out.join(abbrev);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let img = synth_image(c, i, size, seed)?;
            let path = dir.join(format!("{}_{i:04}.ppm", abbrev.to_ascii_lowercase()));
            fs::write(&path, encode_ppm(&img)?).map_err(|e| Error::io(&path, e))?;
            written += 1;
        }
    }
    Ok(written)
}
