//! Supervised fine-tuning of the backbone plus a segmentation head.

use rand::seq::SliceRandom;

use crate::backbone::{apply_running_updates, Backbone, ForwardMode, Pass, BACKBONE_PREFIXES};
use crate::data::metrics::{evaluate_case, MetricRecord};
use crate::data::{Mask, Sample};
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::{OptimizerState, ParamSet, Real, Tape, Tensor, Var};

use super::{poly_lr, stack, studies::subsample_cases};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            base_lr: 1e-3,
            poly_power: 0.9,
            patience: 15,
            train_fraction: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            bail!(Config, "finetune.train_fraction must lie in (0, 1], got {}", self.train_fraction);
        }
        if self.batch_size == 0 {
            bail!(Config, "finetune.batch_size must be positive");
        }
        if !(self.base_lr >= 0.0) {
            bail!(Config, "finetune.base_lr must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    /// Parameters of the best validation epoch.
    pub params: ParamSet<f32>,
    /// Parameters after the last epoch run.
    pub final_params: ParamSet<f32>,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_cases: usize,
}

/// Mean per-pixel softmax cross-entropy of `[N, C, H, W]` logits against
/// integer labels (`N·H·W` of them, row-major).
pub fn softmax_cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (n, c, h, w) = tape.value(logits).dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        bail!(Shape, "{} labels for {n}x{h}x{w} logits", labels.len());
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        bail!(Data, "label {bad} is not below the {c} segmentation classes");
    }
    let x = tape.value(logits).data();
    let mut grad = vec![T::zero(); x.len()];
    let inv = 1.0 / (n * hw) as f64;
    let mut value = 0.0;
    let mut e = vec![0.0f64; c];
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let m = (0..c).map(|k| x[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, ek) in e.iter_mut().enumerate() {
                *ek = (x[at(k)].as_f64() - m).exp();
                z += *ek;
            }
            let label = labels[b * hw + p] as usize;
            value -= (x[at(label)].as_f64() - m) - z.ln();
            for (k, ek) in e.iter().enumerate() {
                let target = if k == label { 1.0 } else { 0.0 };
                grad[at(k)] = T::of((ek / z - target) * inv);
            }
        }
    }
    tape.fused_scalar("softmax_cross_entropy", T::of(value * inv), vec![(logits, grad)])
}

/// Backbone weights before any training for `seed`; pretraining starts
/// from the same tensors.
pub fn initial_params(backbone: &Backbone, seed: u64) -> ParamSet<f32> {
    backbone.init_params(&mut rng::stream(seed, "init", 0))
}

/// Encoder and decoder tensors of `source` plus a fresh segmentation head.
pub fn segmentation_params(backbone: &Backbone, source: &ParamSet<f32>, seed: u64) -> Result<ParamSet<f32>> {
    let mut ps = ParamSet::new();
    for (name, t) in source.iter() {
        if BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)) {
            let mut t = t.clone();
            t.zero_grad();
            ps.insert(name, t);
        }
    }
    let reference = initial_params(backbone, 0);
    for (name, t) in reference.iter() {
        if BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)) {
            match ps.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => bail!(Shape, "initial weight '{name}' has shape {:?}, model expects {:?}", have.shape(), t.shape()),
                None => bail!(Param, "initial weights lack '{name}'"),
            }
        }
    }
    backbone.init_seg_head(&mut ps, &mut rng::stream(seed, "head", 0));
    Ok(ps)
}

/// Arg-max class maps for `images`, eval mode.
pub fn predict(backbone: &Backbone, params: &ParamSet<f32>, images: &[&Tensor<f32>], batch: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = stack(chunk)?;
        let mut tape = Tape::<f32>::new();
        let vars = params.register(&mut tape, false);
        let xv = tape.constant(x);
        let mut r = rng::stream(0, "predict", 0);
        let mut pass = Pass::new(&mut tape, params, &vars, ForwardMode::EVAL, &mut r);
        let enc = backbone.encode(&mut pass, xv)?;
        let y = backbone.decode(&mut pass, &enc)?;
        let logits = backbone.segment(&mut pass, y)?;
        let (n, c, h, w) = tape.value(logits).dims4()?;
        let d = tape.value(logits).data();
        for b in 0..n {
            let mut data = Vec::with_capacity(h * w);
            for p in 0..h * w {
                let mut best = 0;
                for k in 1..c {
                    if d[(b * c + k) * h * w + p] > d[(b * c + best) * h * w + p] {
                        best = k;
                    }
                }
                data.push(best as u8);
            }
            out.push(Mask::new(h, w, data)?);
        }
    }
    Ok(out)
}

/// Per-class metrics of `params` on labeled `samples`.
pub fn evaluate(backbone: &Backbone, params: &ParamSet<f32>, samples: &[Sample], spacing: Option<f64>) -> Result<MetricRecord> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(backbone, params, &images, 16)?;
    let mut cases = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let Some(gt) = &s.mask else {
            bail!(Data, "case {} has no mask to evaluate against", s.case_id);
        };
        cases.push(evaluate_case(p, gt, backbone.config.seg_classes, spacing)?);
    }
    MetricRecord::from_cases(&cases)
}

/// Trains on `train` (preprocessed, labeled), early-stopping on mean
/// foreground DSC over `val`. `init` supplies encoder and decoder weights;
/// `None` uses the untrained initialization for `cfg.seed`.
pub fn finetune(backbone: &Backbone, train: &[Sample], val: &[Sample], init: Option<&ParamSet<f32>>, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    cfg.validate()?;
    if val.is_empty() {
        bail!(Data, "fine-tuning needs at least one validation case");
    }
    let train = subsample_cases(train, cfg.train_fraction, cfg.seed)?;
    let train_cases = {
        let mut ids: Vec<&str> = train.iter().map(|s| s.case_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    let labels: Vec<&Mask> = train
        .iter()
        .map(|s| s.mask.as_ref().ok_or_else(|| crate::Error::Data(format!("training case {} has no mask", s.case_id))))
        .collect::<Result<_>>()?;
    let source = match init {
        Some(p) => p.clone(),
        None => initial_params(backbone, cfg.seed),
    };
    let mut params = segmentation_params(backbone, &source, cfg.seed)?;
    let mut opt = OptimizerState::<f32>::adam(0.9, 0.999, 1e-8);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;

    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "finetune_shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = stack(&chunk.iter().map(|&i| &train[i].image).collect::<Vec<_>>())?;
            let y: Vec<u8> = chunk.iter().flat_map(|&i| labels[i].data.iter().copied()).collect();
            let mut tape = Tape::<f32>::new();
            let vars = params.register(&mut tape, true);
            let xv = tape.constant(x);
            let mut r = rng::stream(cfg.seed, "finetune_dropout", step);
            let (logits, updates) = {
                let mut pass = Pass::new(&mut tape, &params, &vars, ForwardMode::TRAIN, &mut r);
                let enc = backbone.encode(&mut pass, xv)?;
                let feat = backbone.decode(&mut pass, &enc)?;
                let logits = backbone.segment(&mut pass, feat)?;
                (logits, pass.finish())
            };
            let loss = softmax_cross_entropy(&mut tape, logits, &y)?;
            loss_sum += tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            params.store_grads(&tape, &vars, &grads)?;
            opt.step(&mut params, poly_lr(step, total, cfg.base_lr, cfg.poly_power))?;
            apply_running_updates(&mut params, &updates)?;
            params.zero_grads();
            step += 1;
        }
        let val_dsc = evaluate(backbone, &params, val, None)?.mean_dsc();
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_dsc,
        });
        log::debug!("finetune epoch {epoch}: val dsc {val_dsc:.4}");
        if val_dsc > best.0 {
            best = (val_dsc, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    if cfg.epochs == 0 {
        best.0 = evaluate(backbone, &params, val, None)?.mean_dsc();
    }
    Ok(FinetuneResult {
        params: best.2,
        final_params: params,
        best_val_dsc: best.0,
        best_epoch: best.1,
        history,
        train_cases,
    })
}
