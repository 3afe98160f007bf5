//! Hounsfield-unit windowing and per-image z-scoring.

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Default clip window `[lo, hi]`.
pub const HU_CLIP: (f32, f32) = (-1024.0, 325.0);

/// Clamps to `[lo, hi]`, then z-scores the whole image with its own mean and
/// population standard deviation. A constant image becomes all zeros.
pub fn preprocess_hu(image: &Tensor<f32>, lo: f32, hi: f32) -> Result<Tensor<f32>> {
    if !(lo < hi) {
        bail!(Param, "HU window needs lo < hi, got [{lo}, {hi}]");
    }
    let clipped: Vec<f64> = image.data().iter().map(|&v| v.clamp(lo, hi) as f64).collect();
    let n = clipped.len().max(1) as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let data = if std == 0.0 {
        vec![0.0; clipped.len()]
    } else {
        clipped.iter().map(|v| ((v - mean) / std) as f32).collect()
    };
    Tensor::new(image.shape(), data)
}

/// Centre crop of a `[C, H, W]` image to `size × size`.
pub fn center_crop(image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = image.shape() else {
        bail!(Shape, "center_crop expects [C, H, W], got {:?}", image.shape());
    };
    let (c, h, w) = (*c, *h, *w);
    if size > h || size > w || size == 0 {
        bail!(Shape, "cannot crop {h}x{w} to {size}x{size}");
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in top..top + size {
            let row = (ch * h + r) * w;
            out.extend_from_slice(&image.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(&[c, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_bounds_apply_before_normalization() {
        let x = Tensor::new(&[1, 1, 2], vec![2000.0, 0.0]).unwrap();
        let y = Tensor::new(&[1, 1, 2], vec![325.0, 0.0]).unwrap();
        assert_eq!(preprocess_hu(&x, -1024.0, 325.0).unwrap(), preprocess_hu(&y, -1024.0, 325.0).unwrap());
        let x = Tensor::new(&[1, 1, 2], vec![-2000.0, 0.0]).unwrap();
        let y = Tensor::new(&[1, 1, 2], vec![-1024.0, 0.0]).unwrap();
        assert_eq!(preprocess_hu(&x, -1024.0, 325.0).unwrap(), preprocess_hu(&y, -1024.0, 325.0).unwrap());
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let x = Tensor::full(&[1, 4, 4], 77.0);
        assert!(preprocess_hu(&x, -1024.0, 325.0).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_fn(&[1, 4, 4], |i| 400.0 + i as f32);
        assert!(preprocess_hu(&x, -1024.0, 325.0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_crop_takes_middle() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        assert_eq!(center_crop(&x, 2).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(center_crop(&x, 5).is_err());
    }
}
