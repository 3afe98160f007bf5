//! Teacher–student pretraining on unlabeled images.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{apply_augmentation, build_correspondence, sample_augmentation, AugConfig, PriorDictionary};
use crate::backbone::{apply_running_updates, Backbone, DualNetworkState, ForwardMode, Pass};
use crate::error::{bail, Result};
use crate::objectives::{
    global_loss, lambda_schedule_from, local_loss, mc_uncertainty, Ablation, LocalInputs, LossBreakdown, DEFAULT_MC_PASSES, LAMBDA_START,
};
use crate::rng;
use crate::tensor::tape::BatchStats;
use crate::tensor::{OptimizerState, ParamVars, Tape, Tensor, Var};

use super::{stack, warmup_cosine_lr};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// LARS trust coefficient.
    pub trust: f64,
    pub ablation: Ablation,
    pub mc_passes: usize,
    pub lambda_start: f64,
    /// Absolute value around the per-image mean instead of per pixel.
    pub eq5_outer_abs: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            base_lr: 0.2,
            warmup_epochs: 2,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust: 0.02,
            ablation: Ablation::Full,
            mc_passes: DEFAULT_MC_PASSES,
            lambda_start: LAMBDA_START,
            eq5_outer_abs: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            bail!(Config, "pretrain.batch_size must be at least 2 so a stabilizer image exists, got {}", self.batch_size);
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            bail!(Config, "pretrain.warmup_epochs ({}) must be below pretrain.epochs ({})", self.warmup_epochs, self.epochs);
        }
        if self.mc_passes < 1 {
            bail!(Config, "ssl.mc_passes must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_start) {
            bail!(Config, "ssl.lambda_start must lie in [0, 1]");
        }
        if !(self.base_lr >= 0.0 && self.trust > 0.0 && self.weight_decay >= 0.0) {
            bail!(Config, "pretrain learning rate, trust and weight decay must be non-negative");
        }
        Ok(())
    }
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lambda: f64,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "step,global,local,total,matched_pixels,mean_U,lambda,lr";

impl TraceRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.global, l.local, l.total, l.matched_pixel_count, l.mean_uncertainty, self.lambda, self.lr
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub trace: Vec<TraceRow>,
    /// Mean over embedding dimensions of the across-batch standard
    /// deviation of the student's global output, in eval mode.
    pub embedding_std: f64,
}

/// Augmented views of one batch.
pub struct SslBatch {
    /// Student view `[B, C, H, W]`.
    pub x1: Tensor<f32>,
    /// Teacher view.
    pub x2: Tensor<f32>,
    /// Stabilizer image pushed through the same two augmentations.
    pub stabilizer: Option<(Tensor<f32>, Tensor<f32>)>,
    pub dicts: Vec<PriorDictionary>,
    /// Index within the batch of each image's stabilizer partner.
    pub partners: Vec<usize>,
}

/// Draws augmentations for `indices` (one pair per image, replayable from
/// `(seed, step)`) and the stabilizer partners.
pub fn build_batch(images: &[Tensor<f32>], indices: &[usize], aug: &AugConfig, seed: u64, step: u64, with_stabilizer: bool) -> Result<SslBatch> {
    let b = indices.len();
    if b < 2 {
        bail!(Config, "a pretraining batch needs at least 2 images, got {b}");
    }
    let mut pick = rng::stream(seed, "stabilizer", step);
    let partners: Vec<usize> = (0..b)
        .map(|i| {
            let j = pick.random_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    let (mut v1, mut v2, mut s1, mut s2, mut dicts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (slot, &idx) in indices.iter().enumerate() {
        let img = &images[idx];
        let source = (img.shape()[1], img.shape()[2]);
        let mut r = rng::stream(seed, "augment", step * b as u64 + slot as u64);
        let p1 = sample_augmentation(&mut r, aug, source)?;
        let p2 = sample_augmentation(&mut r, aug, source)?;
        v1.push(apply_augmentation(img, &p1)?);
        v2.push(apply_augmentation(img, &p2)?);
        if with_stabilizer {
            let other = &images[indices[partners[slot]]];
            if other.shape() != img.shape() {
                bail!(Shape, "stabilizer image {:?} differs in shape from {:?}", other.shape(), img.shape());
            }
            s1.push(apply_augmentation(other, &p1)?);
            s2.push(apply_augmentation(other, &p2)?);
        }
        dicts.push(build_correspondence(&p1, &p2)?);
    }
    let st = |v: &[Tensor<f32>]| stack(&v.iter().collect::<Vec<_>>());
    Ok(SslBatch {
        x1: st(&v1)?,
        x2: st(&v2)?,
        stabilizer: if with_stabilizer { Some((st(&s1)?, st(&s2)?)) } else { None },
        dicts,
        partners,
    })
}

/// Options of one SSL forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SslOptions {
    pub ablation: Ablation,
    pub mc_passes: usize,
    pub outer_abs: bool,
    pub seed: u64,
    pub step: u64,
}

/// Student and teacher on one tape; the teacher is registered as
/// constants.
pub struct SslGraph {
    pub tape: Tape<f32>,
    pub student_vars: ParamVars,
    pub teacher_vars: ParamVars,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub updates: Vec<(String, BatchStats<f32>)>,
    /// Student global output for the `B` view-1 images.
    pub student_global: Var,
}

fn concat(a: &Tensor<f32>, b: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
    match b {
        Some(b) => Tensor::concat_batch(&[a, b]),
        None => Ok(a.clone()),
    }
}

pub fn ssl_forward(backbone: &Backbone, state: &DualNetworkState, batch: &SslBatch, opt: SslOptions) -> Result<SslGraph> {
    let b = batch.dicts.len();
    let use_stab = opt.ablation.uses_stabilizer();
    if use_stab && batch.stabilizer.is_none() {
        bail!(Param, "ablation {} needs stabilizer views", opt.ablation);
    }
    let stab = if use_stab { batch.stabilizer.as_ref() } else { None };
    let mut tape = Tape::<f32>::new();
    let teacher_vars = state.teacher.register(&mut tape, false);

    // teacher side
    let xt = tape.constant(concat(&batch.x2, stab.map(|s| &s.1))?);
    let mut trng = rng::stream(opt.seed, "teacher", opt.step);
    let (t_enc, t_global, t_pixel) = {
        let mut pass = Pass::new(&mut tape, &state.teacher, &teacher_vars, ForwardMode::TEACHER, &mut trng);
        let enc = backbone.encode(&mut pass, xt)?;
        let g = backbone.project_global(&mut pass, enc.z)?;
        let g = pass.tape.slice_batch(g, 0, b)?;
        let y = backbone.decode(&mut pass, &enc)?;
        let p = backbone.project_pixel(&mut pass, y)?;
        (enc, g, p)
    };
    let t_global = tape.value(t_global).clone();
    let t_pixel = tape.value(t_pixel).clone();
    let uncertainty = if opt.ablation.uses_uncertainty() {
        let u = mc_uncertainty(backbone, &mut tape, &state.teacher, &teacher_vars, &t_enc, opt.mc_passes, rng::derive_seed(opt.seed, "mc", opt.step))?;
        Some(u.slice_batch(0, b)?)
    } else {
        None
    };

    // student side
    let student_vars = state.student.register(&mut tape, true);
    let xs = tape.constant(concat(&batch.x1, stab.map(|s| &s.0))?);
    let mut srng = rng::stream(opt.seed, "student_dropout", opt.step);
    let (s_global, s_pixel, updates) = {
        let mut pass = Pass::new(&mut tape, &state.student, &student_vars, ForwardMode::TRAIN, &mut srng);
        let enc = backbone.encode(&mut pass, xs)?;
        let g = backbone.project_global(&mut pass, enc.z)?;
        let y = backbone.decode(&mut pass, &enc)?;
        let p = backbone.project_pixel(&mut pass, y)?;
        (g, p, pass.finish())
    };
    let s_global_b = tape.slice_batch(s_global, 0, b)?;
    let global = global_loss(&mut tape, &t_global, s_global_b)?;

    let (loss, local_value, matched) = if opt.ablation.uses_local() {
        let ys = tape.slice_batch(s_pixel, 0, b)?;
        let yt = t_pixel.slice_batch(0, b)?;
        let stab_maps = if use_stab {
            let ds = tape.slice_batch(s_pixel, b, b)?;
            Some((ds, t_pixel.slice_batch(b, b)?))
        } else {
            None
        };
        let inp = LocalInputs {
            student: ys,
            teacher: &yt,
            stabilizer: stab_maps.as_ref().map(|(v, t)| (*v, t)),
            uncertainty: uncertainty.as_ref(),
            dicts: &batch.dicts,
            outer_abs: opt.outer_abs,
        };
        let (local, matched) = local_loss(&mut tape, &inp)?;
        let lv = tape.value(local).item() as f64;
        (tape.add(global, local)?, lv, matched)
    } else {
        (global, 0.0, batch.dicts.iter().map(PriorDictionary::matched_count).sum())
    };
    let mean_u = uncertainty.as_ref().map_or(0.0, |u| u.data().iter().map(|&v| v as f64).sum::<f64>() / u.numel() as f64);
    let breakdown = LossBreakdown::new(tape.value(global).item() as f64, local_value, matched, mean_u);
    Ok(SslGraph {
        tape,
        student_vars,
        teacher_vars,
        loss,
        breakdown,
        updates,
        student_global: s_global_b,
    })
}

/// Mean over output dimensions of the across-batch standard deviation of
/// the student's global projection, eval mode, unaugmented images.
pub fn embedding_std(backbone: &Backbone, state: &DualNetworkState, images: &[Tensor<f32>]) -> Result<f64> {
    if images.len() < 2 {
        return Ok(0.0);
    }
    let x = stack(&images.iter().collect::<Vec<_>>())?;
    let mut tape = Tape::<f32>::new();
    let vars = state.student.register(&mut tape, false);
    let xv = tape.constant(x);
    let mut r = rng::stream(0, "embedding_std", 0);
    let mut pass = Pass::new(&mut tape, &state.student, &vars, ForwardMode::EVAL, &mut r);
    let enc = backbone.encode(&mut pass, xv)?;
    let g = backbone.project_global(&mut pass, enc.z)?;
    let z = tape.value(g);
    let (n, k) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| z.data()[i * k + c] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        total += (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    }
    Ok(total / k as f64)
}

/// Runs `cfg.epochs` epochs over `images` (preprocessed `[C, H, W]`),
/// updating `state` in place. `on_step` sees every trace row as it is
/// produced.
pub fn pretrain(
    backbone: &Backbone,
    images: &[Tensor<f32>],
    aug: &AugConfig,
    cfg: &PretrainConfig,
    state: &mut DualNetworkState,
    on_step: &mut dyn FnMut(&TraceRow),
) -> Result<PretrainReport> {
    cfg.validate()?;
    aug.validate()?;
    state.validate()?;
    let steps_per_epoch = (images.len() / cfg.batch_size) as u64;
    if cfg.epochs > 0 && steps_per_epoch == 0 {
        bail!(Config, "{} images cannot fill one batch of {}", images.len(), cfg.batch_size);
    }
    let total = steps_per_epoch * cfg.epochs as u64;
    let warmup = steps_per_epoch * cfg.warmup_epochs as u64;
    let mut opt = OptimizerState::<f32>::lars(cfg.momentum, cfg.trust, cfg.weight_decay);
    let mut report = PretrainReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = build_batch(images, chunk, aug, cfg.seed, step, cfg.ablation.uses_stabilizer())?;
            let opts = SslOptions {
                ablation: cfg.ablation,
                mc_passes: cfg.mc_passes,
                outer_abs: cfg.eq5_outer_abs,
                seed: cfg.seed,
                step,
            };
            let graph = ssl_forward(backbone, state, &batch, opts)?;
            let grads = graph.tape.backward(graph.loss)?;
            state.student.store_grads(&graph.tape, &graph.student_vars, &grads)?;
            let lr = warmup_cosine_lr(step, total, warmup, cfg.base_lr);
            opt.step(&mut state.student, lr)?;
            apply_running_updates(&mut state.student, &graph.updates)?;
            state.student.zero_grads();
            let lambda = lambda_schedule_from(cfg.lambda_start, step, total);
            crate::objectives::ema_update(&mut state.teacher, &state.student, lambda)?;
            let row = TraceRow {
                step,
                loss: graph.breakdown,
                lambda,
                lr,
            };
            on_step(&row);
            report.trace.push(row);
            step += 1;
        }
    }
    let probe: Vec<Tensor<f32>> = images.iter().take(64).cloned().collect();
    report.embedding_std = embedding_std(backbone, state, &probe)?;
    Ok(report)
}
