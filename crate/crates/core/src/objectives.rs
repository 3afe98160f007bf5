//! Consistency losses, the teacher EMA schedule and MC-dropout uncertainty.
//!
//! Student quantities enter as tape handles; teacher quantities are plain
//! tensors, so no gradient can reach the teacher. All losses are fused
//! scalar nodes whose local gradients are computed at forward time.

use std::fmt;
use std::str::FromStr;

use crate::augment::PriorDictionary;
use crate::backbone::{Backbone, Encoded, ForwardMode, Pass};
use crate::error::{bail, Error, Result};
use crate::rng;
use crate::tensor::{ParamSet, ParamVars, Real, Tape, Tensor, Var};

/// Added inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;
pub const LAMBDA_START: f64 = 0.996;
pub const DEFAULT_MC_PASSES: usize = 20;

const PROB_SUM_TOL: f64 = 1e-5;

/// Which loss terms a pretraining run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Global consistency only.
    Go,
    /// Global plus plain pixel consistency.
    Gp,
    /// Global plus stabilized pixel consistency, no uncertainty gating.
    Gpc,
    /// Everything.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Go, Ablation::Gp, Ablation::Gpc, Ablation::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Go => "go",
            Ablation::Gp => "gp",
            Ablation::Gpc => "gpc",
            Ablation::Full => "full",
        }
    }

    pub fn uses_local(self) -> bool {
        self != Ablation::Go
    }

    pub fn uses_stabilizer(self) -> bool {
        matches!(self, Ablation::Gpc | Ablation::Full)
    }

    pub fn uses_uncertainty(self) -> bool {
        self == Ablation::Full
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "go" => Ok(Ablation::Go),
            "gp" => Ok(Ablation::Gp),
            "gpc" => Ok(Ablation::Gpc),
            "full" => Ok(Ablation::Full),
            _ => bail!(Config, "unknown ablation '{s}' (expected go, gp, gpc or full)"),
        }
    }
}

/// One step's loss values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub global: f64,
    pub local: f64,
    pub total: f64,
    pub matched_pixel_count: usize,
    pub mean_uncertainty: f64,
}

impl LossBreakdown {
    pub fn new(global: f64, local: f64, matched_pixel_count: usize, mean_uncertainty: f64) -> Self {
        Self {
            global,
            local,
            total: total_loss(global, local),
            matched_pixel_count,
            mean_uncertainty,
        }
    }
}

pub fn total_loss(global: f64, local: f64) -> f64 {
    global + local
}

fn check_probs<T: Real>(what: &str, t: &[T], k: usize, stride: usize, check_sum: bool) -> Result<()> {
    if let Some(v) = t.iter().find(|v| **v < T::zero()) {
        bail!(Contract, "{what} contains a negative probability {v}");
    }
    if check_sum {
        let groups = t.len() / (k * stride);
        for g in 0..groups {
            for p in 0..stride {
                let s: f64 = (0..k).map(|c| t[g * k * stride + c * stride + p].as_f64()).sum();
                if (s - 1.0).abs() > PROB_SUM_TOL {
                    bail!(Contract, "{what} does not sum to 1 (got {s})");
                }
            }
        }
    }
    Ok(())
}

/// Cross-entropy of student probabilities against fixed teacher targets,
/// averaged over the batch. Both are `[N, K]`.
pub fn global_loss<T: Real>(tape: &mut Tape<T>, teacher: &Tensor<T>, student: Var) -> Result<Var> {
    let s = tape.value(student);
    if s.shape() != teacher.shape() || s.rank() != 2 {
        bail!(Shape, "global_loss: teacher {:?} vs student {:?}, expected equal [N, K]", teacher.shape(), s.shape());
    }
    let (n, k) = (s.shape()[0], s.shape()[1]);
    check_probs("teacher global output", teacher.data(), k, 1, true)?;
    check_probs("student global output", s.data(), k, 1, false)?;
    let eps = T::of(LOG_EPS);
    let inv_n = T::of(1.0 / n as f64);
    let mut value = 0.0;
    let mut grad = vec![T::zero(); n * k];
    for ((t, sv), g) in teacher.data().iter().zip(s.data()).zip(grad.iter_mut()) {
        value -= t.as_f64() * (sv.as_f64() + LOG_EPS).ln();
        *g = -*t / (*sv + eps) * inv_n;
    }
    tape.fused_scalar("global_loss", T::of(value / n as f64), vec![(student, grad)])
}

/// Pixel-projected maps of one side (student or teacher) for one batch.
struct PixelMaps<'a, T: Real> {
    data: &'a [T],
    k: usize,
    hw: usize,
}

impl<T: Real> PixelMaps<'_, T> {
    #[inline]
    fn at(&self, b: usize, c: usize, p: usize) -> T {
        self.data[(b * self.k + c) * self.hw + p]
    }
}

fn pixel_ce<T: Real>(t: &PixelMaps<'_, T>, s: &PixelMaps<'_, T>, b: usize, j: usize, i: usize) -> f64 {
    (0..t.k).map(|c| -t.at(b, c, j).as_f64() * (s.at(b, c, i).as_f64() + LOG_EPS).ln()).sum()
}

fn add_ce_grad<T: Real>(grad: &mut [T], t: &PixelMaps<'_, T>, s: &PixelMaps<'_, T>, b: usize, j: usize, i: usize, w: f64) {
    let eps = T::of(LOG_EPS);
    let w = T::of(w);
    for c in 0..t.k {
        let idx = (b * s.k + c) * s.hw + i;
        grad[idx] -= w * t.at(b, c, j) / (s.at(b, c, i) + eps);
    }
}

/// Inputs of the pixel-level loss for a batch of `B` view pairs.
pub struct LocalInputs<'a, T: Real> {
    /// Student pixel probabilities on view 1, `[B, K, H1, W1]`.
    pub student: Var,
    /// Teacher pixel probabilities on view 2, `[B, K, H2, W2]`.
    pub teacher: &'a Tensor<T>,
    /// Stabilizer counterparts of the two above, same shapes.
    pub stabilizer: Option<(Var, &'a Tensor<T>)>,
    /// Teacher uncertainty `[B, 1, H2, W2]`; `None` weighs every pixel 1.
    pub uncertainty: Option<&'a Tensor<T>>,
    pub dicts: &'a [PriorDictionary],
    /// Take the absolute value of the per-image mean instead of per pixel.
    pub outer_abs: bool,
}

fn check_map<T: Real>(what: &str, shape: &[usize], b: usize, k: usize, view: (usize, usize)) -> Result<()> {
    if shape != [b, k, view.0, view.1] {
        bail!(Shape, "{what} has shape {shape:?}, expected [{b}, {k}, {}, {}]", view.0, view.1);
    }
    Ok(())
}

/// Pixel-level consistency averaged over matched pairs of each image,
/// then over images with at least one match.
///
/// Without a stabilizer the per-pixel cross-entropy `c_i` is averaged
/// directly. With one, the per-pixel term is `(1 − U_j)·|c_i − s_i|`
/// where `s_i` is the stabilizer cross-entropy. Returns the loss node and
/// the number of matched pairs.
pub fn local_loss<T: Real>(tape: &mut Tape<T>, inp: &LocalInputs<'_, T>) -> Result<(Var, usize)> {
    let ys = tape.value(inp.student);
    if ys.rank() != 4 {
        bail!(Shape, "local_loss: student map must be [B, K, H, W], got {:?}", ys.shape());
    }
    let (b, k) = (ys.shape()[0], ys.shape()[1]);
    if inp.dicts.len() != b {
        bail!(Shape, "local_loss: {} dictionaries for a batch of {b}", inp.dicts.len());
    }
    if b == 0 {
        bail!(Shape, "local_loss: empty batch");
    }
    let (v1, v2) = (inp.dicts[0].view1(), inp.dicts[0].view2());
    if inp.dicts.iter().any(|d| d.view1() != v1 || d.view2() != v2) {
        bail!(Shape, "local_loss: dictionaries disagree on view shapes");
    }
    check_map::<T>("student pixel map", ys.shape(), b, k, v1)?;
    check_map::<T>("teacher pixel map", inp.teacher.shape(), b, k, v2)?;
    let (hw1, hw2) = (v1.0 * v1.1, v2.0 * v2.1);
    check_probs("teacher pixel map", inp.teacher.data(), k, hw2, true)?;
    check_probs("student pixel map", ys.data(), k, hw1, false)?;
    if let Some((ds, dt)) = inp.stabilizer {
        check_map::<T>("student stabilizer map", tape.value(ds).shape(), b, k, v1)?;
        check_map::<T>("teacher stabilizer map", dt.shape(), b, k, v2)?;
        check_probs("teacher stabilizer map", dt.data(), k, hw2, true)?;
        check_probs("student stabilizer map", tape.value(ds).data(), k, hw1, false)?;
    }
    if let Some(u) = inp.uncertainty {
        if u.shape() != [b, 1, v2.0, v2.1] {
            bail!(Shape, "uncertainty map has shape {:?}, expected [{b}, 1, {}, {}]", u.shape(), v2.0, v2.1);
        }
        if let Some(bad) = u.data().iter().find(|x| !(**x >= T::zero() && **x <= T::one())) {
            bail!(Contract, "uncertainty value {bad} outside [0, 1]");
        }
    }

    let ys_t = tape.value(inp.student).clone();
    let s = PixelMaps { data: ys_t.data(), k, hw: hw1 };
    let t = PixelMaps { data: inp.teacher.data(), k, hw: hw2 };
    let stab = inp.stabilizer.map(|(ds, dt)| (ds, tape.value(ds).clone(), dt));
    let weight = |bi: usize, j: usize| match inp.uncertainty {
        Some(u) => 1.0 - u.data()[bi * hw2 + j].as_f64(),
        None => 1.0,
    };

    let matched: Vec<usize> = inp.dicts.iter().map(PriorDictionary::matched_count).collect();
    let total_matched: usize = matched.iter().sum();
    let images = matched.iter().filter(|&&m| m > 0).count();
    if images == 0 {
        log::warn!("local_loss: no matched pixels in this batch");
        return Ok((tape.fused_scalar("local_loss", T::zero(), Vec::new())?, 0));
    }
    let inv_images = 1.0 / images as f64;

    let mut gs = vec![T::zero(); ys_t.numel()];
    let mut gd = stab.as_ref().map(|(_, v, _)| vec![T::zero(); v.numel()]);
    let mut value = 0.0;
    for (bi, dict) in inp.dicts.iter().enumerate() {
        let m = matched[bi];
        if m == 0 {
            continue;
        }
        let scale = inv_images / m as f64;
        match (&stab, gd.as_mut()) {
            (None, _) => {
                for (i, j) in dict.pairs() {
                    value += scale * pixel_ce(&t, &s, bi, j, i);
                    add_ce_grad(&mut gs, &t, &s, bi, j, i, scale);
                }
            }
            (Some((_, ds_val, dt)), Some(gd)) => {
                let ds = PixelMaps { data: ds_val.data(), k, hw: hw1 };
                let dt = PixelMaps { data: dt.data(), k, hw: hw2 };
                let terms: Vec<(usize, usize, f64, f64)> = dict
                    .pairs()
                    .map(|(i, j)| (i, j, weight(bi, j), pixel_ce(&t, &s, bi, j, i) - pixel_ce(&dt, &ds, bi, j, i)))
                    .collect();
                if inp.outer_abs {
                    let inner: f64 = terms.iter().map(|&(_, _, w, d)| w * d).sum::<f64>() / m as f64;
                    value += inv_images * inner.abs();
                    let sg = sign(inner);
                    for &(i, j, w, _) in &terms {
                        add_ce_grad(&mut gs, &t, &s, bi, j, i, scale * w * sg);
                        add_ce_grad(gd, &dt, &ds, bi, j, i, -scale * w * sg);
                    }
                } else {
                    for &(i, j, w, d) in &terms {
                        value += scale * w * d.abs();
                        let sg = sign(d);
                        add_ce_grad(&mut gs, &t, &s, bi, j, i, scale * w * sg);
                        add_ce_grad(gd, &dt, &ds, bi, j, i, -scale * w * sg);
                    }
                }
            }
            (Some(_), None) => unreachable!("stabilizer gradient buffer allocated with the stabilizer"),
        }
    }
    let mut grads = vec![(inp.student, gs)];
    if let (Some((ds, _, _)), Some(gd)) = (stab, gd) {
        grads.push((ds, gd));
    }
    Ok((tape.fused_scalar("local_loss", T::of(value), grads)?, total_matched))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Plain pixel consistency over matched pairs.
pub fn local_loss_plain<T: Real>(tape: &mut Tape<T>, student: Var, teacher: &Tensor<T>, dicts: &[PriorDictionary]) -> Result<Var> {
    let inp = LocalInputs {
        student,
        teacher,
        stabilizer: None,
        uncertainty: None,
        dicts,
        outer_abs: false,
    };
    local_loss(tape, &inp).map(|(v, _)| v)
}

/// Uncertainty-gated, stabilized pixel consistency.
#[allow(clippy::too_many_arguments)]
pub fn local_loss_full<T: Real>(
    tape: &mut Tape<T>,
    student: Var,
    teacher: &Tensor<T>,
    stab_student: Var,
    stab_teacher: &Tensor<T>,
    uncertainty: &Tensor<T>,
    dicts: &[PriorDictionary],
) -> Result<Var> {
    let inp = LocalInputs {
        student,
        teacher,
        stabilizer: Some((stab_student, stab_teacher)),
        uncertainty: Some(uncertainty),
        dicts,
        outer_abs: false,
    };
    local_loss(tape, &inp).map(|(v, _)| v)
}

/// Stabilizer cross-entropy `s_i` for every matched pair of image `b`, in
/// view-1 order. Maps are `[B, K, H, W]`.
pub fn stabilizer_terms<T: Real>(teacher: &Tensor<T>, student: &Tensor<T>, dict: &PriorDictionary, b: usize) -> Result<Vec<f64>> {
    if student.rank() != 4 || teacher.rank() != 4 || b >= student.shape()[0] || student.shape()[..2] != teacher.shape()[..2] {
        bail!(Shape, "stabilizer maps {:?} / {:?} do not hold image {b}", teacher.shape(), student.shape());
    }
    let k = student.shape()[1];
    check_map::<T>("student stabilizer map", student.shape(), student.shape()[0], k, dict.view1())?;
    check_map::<T>("teacher stabilizer map", teacher.shape(), teacher.shape()[0], k, dict.view2())?;
    let s = PixelMaps { data: student.data(), k, hw: dict.view1().0 * dict.view1().1 };
    let t = PixelMaps { data: teacher.data(), k, hw: dict.view2().0 * dict.view2().1 };
    Ok(dict.pairs().map(|(i, j)| pixel_ce(&t, &s, b, j, i)).collect())
}

/// Teacher momentum at `step` of `total_steps`, rising from
/// `lambda_start` to 1 along a half cosine. Steps past the end give 1.
pub fn lambda_schedule_from(lambda_start: f64, step: u64, total_steps: u64) -> f64 {
    if step >= total_steps {
        return 1.0;
    }
    if step == 0 {
        return lambda_start;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    1.0 - (1.0 - lambda_start) * (phase.cos() + 1.0) / 2.0
}

pub fn lambda_schedule(step: u64, total_steps: u64) -> f64 {
    lambda_schedule_from(LAMBDA_START, step, total_steps)
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s`, for every tensor including running
/// statistics.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, lambda: f64) -> Result<()> {
    if !teacher.same_schema(student) {
        bail!(Shape, "ema_update: teacher and student schemas differ");
    }
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Param, "ema_update: lambda {lambda} outside [0, 1]");
    }
    let (l, m) = (T::of(lambda), T::of(1.0 - lambda));
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = l * *a + m * b;
        }
    }
    Ok(())
}

/// Shannon entropy in nats divided by `ln K`, clamped to `[0, 1]`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// `[N, K, H, W]` mean probabilities → `[N, 1, H, W]` normalized entropy.
pub fn uncertainty_from_mean<T: Real>(pbar: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = pbar.dims4()?;
    if k < 2 {
        bail!(Shape, "uncertainty needs at least 2 classes, got {k}");
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    let mut col = vec![0.0; k];
    for b in 0..n {
        for p in 0..hw {
            for (c, v) in col.iter_mut().enumerate() {
                *v = pbar.data()[(b * k + c) * hw + p].as_f64();
            }
            out.push(T::of(normalized_entropy(&col)));
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

/// MC-dropout uncertainty of an already encoded teacher batch: `passes`
/// decoder + pixel-projector runs with dropout active, each with its own
/// random stream, averaged in pass order.
#[allow(clippy::too_many_arguments)]
pub fn mc_uncertainty<T: Real>(
    backbone: &Backbone,
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    vars: &ParamVars,
    enc: &Encoded,
    passes: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    if passes < 1 {
        bail!(Param, "MC dropout needs at least one pass");
    }
    let prefix = {
        let mut r = rng::stream(seed, "mc_prefix", 0);
        let mut pass = Pass::new(tape, params, vars, ForwardMode::TEACHER_MC, &mut r);
        backbone.decode_prefix(&mut pass, enc)?
    };
    let mut sum: Option<Vec<f64>> = None;
    let mut shape = Vec::new();
    for p in 0..passes {
        let mut r = rng::stream(seed, "mc_dropout", p as u64);
        let mut pass = Pass::new(tape, params, vars, ForwardMode::TEACHER_MC, &mut r);
        let y = backbone.decode_suffix(&mut pass, enc, prefix)?;
        let probs = backbone.project_pixel(&mut pass, y)?;
        let v = tape.value(probs);
        shape = v.shape().to_vec();
        match sum.as_mut() {
            None => sum = Some(v.data().iter().map(|x| x.as_f64()).collect()),
            Some(acc) => acc.iter_mut().zip(v.data()).for_each(|(a, x)| *a += x.as_f64()),
        }
    }
    let inv = 1.0 / passes as f64;
    let pbar = Tensor::new(&shape, sum.expect("passes >= 1").into_iter().map(|v| T::of(v * inv)).collect())?;
    uncertainty_from_mean(&pbar)
}

/// MC-dropout uncertainty of the teacher on `x` (`[N, C, H, W]`).
pub fn uncertainty_map<T: Real>(backbone: &Backbone, teacher: &ParamSet<T>, x: &Tensor<T>, passes: usize, seed: u64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = teacher.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let mut r = rng::stream(seed, "mc_encoder", 0);
    let enc = {
        let mut pass = Pass::new(&mut tape, teacher, &vars, ForwardMode::TEACHER, &mut r);
        backbone.encode(&mut pass, xv)?
    };
    mc_uncertainty(backbone, &mut tape, teacher, &vars, &enc, passes, seed)
}
