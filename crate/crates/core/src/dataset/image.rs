//! Image decoding, PPM encoding and bilinear resampling.
//!
//! Images are `(H, W, 3)` tensors with values in `[0, 1]`; an 8-bit sample
//! `v` maps to exactly `v / 255`.

use crate::tensor::Tensor;
use crate::{Error, Result};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes PPM (P6), PNG, or JPEG (with the `jpeg` feature).
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_with(bytes, image::ImageFormat::Png)
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        decode_jpeg(bytes)
    } else {
        Err(Error::MalformedImage {
            offset: 0,
            reason: "unrecognized image signature".into(),
        })
    }
}

#[cfg(feature = "jpeg")]
fn decode_jpeg(bytes: &[u8]) -> Result<Tensor> {
    decode_with(bytes, image::ImageFormat::Jpeg)
}

#[cfg(not(feature = "jpeg"))]
fn decode_jpeg(_bytes: &[u8]) -> Result<Tensor> {
    Err(Error::MalformedImage {
        offset: 0,
        reason: "JPEG support is not enabled in this build (feature `jpeg`)".into(),
    })
}

fn decode_with(bytes: &[u8], format: image::ImageFormat) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::MalformedImage {
            offset: 0,
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data)?)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedImage {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.malformed(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.malformed(format!("{what} out of range")))
    }
}

/// Binary PPM with `maxval <= 255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut r = HeaderReader { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return Err(r.malformed("missing P6 magic"));
    }
    r.pos = 2;
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(r.malformed("zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(r.malformed(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.malformed("expected single whitespace after maxval")),
    }
    let need = width * height * 3;
    let payload = &bytes[r.pos..];
    if payload.len() < need {
        return Err(Error::MalformedImage {
            offset: bytes.len(),
            reason: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    let scale = maxval as f32;
    let data = payload[..need].iter().map(|&v| v as f32 / scale).collect();
    Ok(Tensor::new(&[height, width, 3], data)?)
}

/// Writes a binary PPM, quantizing `[0, 1]` to 8 bits by rounding.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub(crate) fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        &[h, w, 3] => Ok((h, w)),
        s => Err(Error::Data(format!("expected an (H, W, 3) image, got {s:?}"))),
    }
}

/// Axis-aligned crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Bilinear resample of `region` to `out_h x out_w` (half-pixel centres,
/// edge clamped). Equal sizes reproduce the region exactly.
pub fn resize_region(img: &Tensor, region: Region, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    if region.height == 0
        || region.width == 0
        || region.top + region.height > h
        || region.left + region.width > w
        || out_h == 0
        || out_w == 0
    {
        return Err(Error::Data(format!("bad resize region {region:?} for {h}x{w} image")));
    }
    let src = img.data();
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (p - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, region.height);
    let xs = taps(out_w, region.width);
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |y: usize, x: usize| src[((region.top + y) * w + region.left + x) * 3 + c];
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    top * (1.0 - fy) + bottom * fy
                };
                out.push(v);
            }
        }
    }
    Ok(Tensor::new(&[out_h, out_w, 3], out)?)
}

pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = image_dims(img)?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    resize_region(
        img,
        Region {
            top: 0,
            left: 0,
            height: h,
            width: w,
        },
        out_h,
        out_w,
    )
}
