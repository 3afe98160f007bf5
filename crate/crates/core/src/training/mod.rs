//! Pretraining, fine-tuning and the studies built from them.

pub mod finetune;
pub mod pretrain;
pub mod studies;

pub use finetune::{evaluate, finetune, predict, FinetuneConfig, FinetuneResult};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport, TraceRow, TRACE_HEADER};
pub use studies::{ablate, holdout_study, semi_supervised_run, subsample_cases, AblationRow, HoldoutRow};

use crate::data::{preprocess_hu, Dataset, Sample, Split};
use crate::error::Result;
use crate::tensor::Tensor;

/// Linear ramp to `base` over `warmup` steps, then half-cosine decay to 0
/// at `total`.
pub fn warmup_cosine_lr(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `base · (1 − step/total)^power`.
pub fn poly_lr(step: u64, total: u64, base: f64, power: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

/// Samples of one split with HU windowing and z-scoring applied.
pub fn prepared(dataset: &Dataset, split: Split, clip: (f32, f32)) -> Result<Vec<Sample>> {
    dataset
        .split(split)
        .into_iter()
        .map(|s| {
            Ok(Sample {
                image: preprocess_hu(&s.image, clip.0, clip.1)?,
                ..s.clone()
            })
        })
        .collect()
}

/// Stacks `[C, H, W]` images into one `[N, C, H, W]` batch.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = images
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            (*t).clone().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}
