//! `F32IMG` images and 8-bit PGM export.
//!
//! `F32IMG` layout: magic `F32IMG\0`, then `u32` width, height and channels,
//! then `channels × height × width` little-endian `f32` values in
//! channel-major row-major order.

use std::path::Path;

use super::synth::Mask;
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const F32IMG_MAGIC: &[u8; 7] = b"F32IMG\0";
const HEADER: usize = 7 + 12;

pub fn encode_f32img(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape() else {
        bail!(Shape, "F32IMG stores [C, H, W] images, got {:?}", image.shape());
    };
    let mut out = Vec::with_capacity(HEADER + 4 * image.numel());
    out.extend_from_slice(F32IMG_MAGIC);
    for d in [*w, *h, *c] {
        let Ok(d) = u32::try_from(d) else {
            bail!(Shape, "image dimension {d} does not fit in u32");
        };
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f32img(bytes: &[u8]) -> Result<Tensor<f32>> {
    let truncated = |offset: usize, what: &str| Error::Format {
        offset,
        msg: format!("truncated {what}"),
    };
    if bytes.len() < F32IMG_MAGIC.len() {
        return Err(truncated(bytes.len(), "magic"));
    }
    if &bytes[..7] != F32IMG_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected F32IMG".into(),
        });
    }
    if bytes.len() < HEADER {
        return Err(truncated(bytes.len(), "header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[7 + 4 * i..11 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format {
            offset: 7,
            msg: "image dimensions overflow".into(),
        })?;
    let payload = &bytes[HEADER..];
    if payload.len() < 4 * n {
        return Err(truncated(HEADER + payload.len() / 4 * 4, "payload"));
    }
    if payload.len() > 4 * n {
        return Err(Error::Format {
            offset: HEADER + 4 * n,
            msg: "trailing bytes after payload".into(),
        });
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Tensor::new(&[c, h, w], data)
}

pub fn save_f32img(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_f32img(image)?)?;
    Ok(())
}

pub fn load_f32img(path: &Path) -> Result<Tensor<f32>> {
    decode_f32img(&std::fs::read(path)?)
}

/// Masks are stored as single-channel `F32IMG` with integral class values.
pub fn mask_to_tensor(mask: &Mask) -> Tensor<f32> {
    Tensor::new(&[1, mask.height, mask.width], mask.data.iter().map(|&v| v as f32).collect()).expect("mask dims")
}

pub fn tensor_to_mask(t: &Tensor<f32>) -> Result<Mask> {
    let [1, h, w] = t.shape() else {
        bail!(Data, "mask image must have one channel, got shape {:?}", t.shape());
    };
    let mut data = Vec::with_capacity(t.numel());
    for &v in t.data() {
        if !(v >= 0.0 && v <= 255.0 && v.fract() == 0.0) {
            bail!(Data, "mask value {v} is not a class index");
        }
        data.push(v as u8);
    }
    Mask::new(*h, *w, data)
}

/// Binary 8-bit PGM of an `h × w` map, mapping `lo → 0` and `hi → 255`
/// linearly (clamped, rounded to nearest).
pub fn encode_pgm(values: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<Vec<u8>> {
    if values.len() != h * w {
        bail!(Shape, "PGM of {h}x{w} needs {} values, got {}", h * w, values.len());
    }
    if !(lo < hi) {
        bail!(Param, "PGM range needs lo < hi");
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let scale = 255.0 / (hi as f64 - lo as f64);
    out.extend(values.iter().map(|&v| ((v as f64 - lo as f64) * scale).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn save_pgm(path: &Path, values: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<()> {
    std::fs::write(path, encode_pgm(values, h, w, lo, hi)?)?;
    Ok(())
}
