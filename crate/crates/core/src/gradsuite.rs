//! Finite-difference checks of every layer, every loss and the assembled
//! network, shared by the `gradcheck` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::PriorDictionary;
use crate::backbone::{Backbone, BackboneConfig, ForwardMode, Pass};
use crate::error::Result;
use crate::objectives::{global_loss, local_loss, LocalInputs};
use crate::tensor::{check_gradients, BnMode, GradCheckReport, ParamSet, Real, Tape, Tensor, Var};
use crate::training::finetune::softmax_cross_entropy;

/// Relative error bound for 64-bit checks.
pub const TOL_F64: f64 = 1e-5;
/// Relative error bound for 32-bit checks.
pub const TOL_F32: f64 = 1e-3;

/// One checked tensor of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub case: &'static str,
    pub tensor: String,
    pub max_rel_error: f64,
}

/// Finite-difference step and tolerance for `T`.
pub fn settings<T: Real>() -> (f64, f64) {
    if T::NAME == "f64" {
        (1e-6, TOL_F64)
    } else {
        (3e-3, TOL_F32)
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn uniform<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.0.random_range(lo..hi)))
    }

    /// Values with magnitude in `[0.2, 1)` so no ReLU kink is near.
    fn away_from_zero<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.random_range(0.2..1.0);
            T::of(if self.0.random_bool(0.5) { m } else { -m })
        })
    }

    fn param<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        self.uniform(shape, -1.0, 1.0).with_requires_grad(true)
    }

    /// Softmax over axis 1 of random logits, as a plain tensor.
    fn probs<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let logits = self.uniform::<T>(shape, -2.0, 2.0);
        let mut tape = Tape::new();
        let v = tape.constant(logits);
        let p = tape.softmax(v, 1).expect("rank >= 2");
        tape.value(p).clone()
    }

    fn dicts(&mut self, b: usize, side: usize) -> Vec<PriorDictionary> {
        (0..b)
            .map(|_| {
                let map = (0..side * side)
                    .map(|_| {
                        if self.0.random_bool(0.25) {
                            PriorDictionary::NO_MATCH
                        } else {
                            self.0.random_range(0..(side * side) as u32)
                        }
                    })
                    .collect();
                PriorDictionary::from_entries((side, side), (side, side), map).expect("square views")
            })
            .collect()
    }
}

fn rows(case: &'static str, report: GradCheckReport) -> Vec<SuiteRow> {
    report
        .entries
        .into_iter()
        .map(|e| SuiteRow {
            case,
            tensor: e.name,
            max_rel_error: e.max_rel_error,
        })
        .collect()
}

fn tiny_backbone() -> Backbone {
    Backbone::new(BackboneConfig {
        base_width: 4,
        depth: 2,
        projector_dim: 6,
        projector_hidden: 5,
        pixel_dim: 3,
        seg_classes: 3,
        ..BackboneConfig::default()
    })
    .expect("valid toy configuration")
}

/// Runs every case for `seed` in precision `T`. The assembled network is
/// checked only in `f64`.
pub fn gradient_suite<T: Real>(seed: u64) -> Result<Vec<SuiteRow>> {
    let (eps, _) = settings::<T>();
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let none = ParamSet::<T>::new();

    // layers
    let mut ps = ParamSet::new();
    ps.insert("w", g.param(&[4, 6]));
    ps.insert("b", g.param(&[4]));
    let x = g.uniform::<T>(&[3, 6], -1.0, 1.0).with_requires_grad(true);
    out.extend(rows(
        "linear",
        check_gradients(&ps, &x, eps, |t, v, x| t.linear(x, v.get("w")?, Some(v.get("b")?)))?,
    ));

    for (case, stride, k, bias, side) in [("conv2d_3x3", 1, 3, true, 5), ("conv2d_stride2", 2, 3, false, 6), ("conv2d_1x1", 1, 1, true, 4)] {
        let mut ps = ParamSet::new();
        ps.insert("kernel", g.param(&[3, 2, k, k]));
        if bias {
            ps.insert("bias", g.param(&[3]));
        }
        let x = g.uniform::<T>(&[2, 2, side, side], -1.0, 1.0).with_requires_grad(true);
        out.extend(rows(
            case,
            check_gradients(&ps, &x, eps, |t, v, x| {
                let b = if bias { Some(v.get("bias")?) } else { None };
                t.conv2d(x, v.get("kernel")?, b, stride, k / 2)
            })?,
        ));
    }

    for (case, mode) in [("batch_norm_batch", BnMode::Batch), ("batch_norm_running", BnMode::Running)] {
        let mut ps = ParamSet::new();
        ps.insert("gamma", g.param(&[3]));
        ps.insert("beta", g.param(&[3]));
        let mean = g.uniform::<T>(&[3], -0.5, 0.5).into_data();
        let var = g.uniform::<T>(&[3], 0.5, 2.0).into_data();
        let x = g.uniform::<T>(&[4, 3, 2, 2], -1.0, 1.0).with_requires_grad(true);
        out.extend(rows(
            case,
            check_gradients(&ps, &x, eps, |t, v, x| {
                let running = (mode == BnMode::Running).then_some((mean.as_slice(), var.as_slice()));
                Ok(t.batch_norm(x, v.get("gamma")?, v.get("beta")?, mode, running, T::of(1e-5))?.0)
            })?,
        ));
    }

    let x = g.away_from_zero::<T>(&[2, 3, 4]).with_requires_grad(true);
    out.extend(rows("relu", check_gradients(&none, &x, eps, |t, _, x| t.relu(x))?));

    let x = g.uniform::<T>(&[2, 3, 4], -1.0, 1.0).with_requires_grad(true);
    out.extend(rows(
        "dropout",
        check_gradients(&none, &x, eps, |t, _, x| t.dropout(x, 0.3, &mut ChaCha8Rng::seed_from_u64(seed), true))?,
    ));

    let x = g.uniform::<T>(&[2, 4, 3], -2.0, 2.0).with_requires_grad(true);
    out.extend(rows("softmax", check_gradients(&none, &x, eps, |t, _, x| t.softmax(x, 1))?));

    let x = g.uniform::<T>(&[2, 3, 4, 4], -1.0, 1.0).with_requires_grad(true);
    out.extend(rows("global_avg_pool", check_gradients(&none, &x, eps, |t, _, x| t.global_avg_pool(x))?));
    out.extend(rows("upsample2x", check_gradients(&none, &x, eps, |t, _, x| t.upsample2x(x))?));
    out.extend(rows("slice_batch", check_gradients(&none, &x, eps, |t, _, x| t.slice_batch(x, 1, 1))?));

    let mut ps = ParamSet::new();
    ps.insert("p", g.param(&[2, 3]));
    let c = g.uniform::<T>(&[2, 3], -1.0, 1.0);
    let x = g.uniform::<T>(&[2, 3], -1.0, 1.0).with_requires_grad(true);
    out.extend(rows(
        "elementwise",
        check_gradients(&ps, &x, eps, |t, v, x| {
            let p = v.get("p")?;
            let s = t.add(x, p)?;
            let d = t.sub(x, p)?;
            let m = t.mul(s, d)?;
            let m = t.scale(m, T::of(0.5))?;
            let k = t.dot_const(m, &c)?;
            let total = t.sum(m)?;
            let mean = t.mean(x)?;
            let a = t.add(k, total)?;
            t.add(a, mean)
        })?,
    ));

    // losses, differentiated through the student's softmax
    let teacher = g.probs::<T>(&[3, 5]);
    let x = g.uniform::<T>(&[3, 5], -2.0, 2.0).with_requires_grad(true);
    out.extend(rows(
        "global_loss",
        check_gradients(&none, &x, eps, |t, _, x| {
            let s = t.softmax(x, 1)?;
            global_loss(t, &teacher, s)
        })?,
    ));

    let (b, k, side) = (2, 3, 3);
    let dicts = g.dicts(b, side);
    let yt = g.probs::<T>(&[b, k, side, side]);
    let dt = g.probs::<T>(&[b, k, side, side]);
    let u = g.uniform::<T>(&[b, 1, side, side], 0.0, 1.0);
    let mut ps = ParamSet::new();
    ps.insert("stabilizer_logits", g.uniform::<T>(&[b, k, side, side], -2.0, 2.0).with_requires_grad(true));
    let x = g.uniform::<T>(&[b, k, side, side], -2.0, 2.0).with_requires_grad(true);
    let variants: [(&'static str, bool, bool, bool); 4] = [
        ("local_loss_plain", false, false, false),
        ("local_loss_stabilized", true, false, false),
        ("local_loss_full", true, true, false),
        ("local_loss_outer_abs", true, true, true),
    ];
    for (case, stabilized, weighted, outer_abs) in variants {
        let params = if stabilized { &ps } else { &none };
        out.extend(rows(
            case,
            check_gradients(params, &x, eps, |t, v, x| {
                let s = t.softmax(x, 1)?;
                let stabilizer = if stabilized {
                    let l = v.get("stabilizer_logits")?;
                    Some((t.softmax(l, 1)?, &dt))
                } else {
                    None
                };
                let inp = LocalInputs {
                    student: s,
                    teacher: &yt,
                    stabilizer,
                    uncertainty: weighted.then_some(&u),
                    dicts: &dicts,
                    outer_abs,
                };
                Ok(local_loss(t, &inp)?.0)
            })?,
        ));
    }

    let labels: Vec<u8> = (0..2 * 9).map(|_| g.0.random_range(0..4u8)).collect();
    let x = g.uniform::<T>(&[2, 4, 3, 3], -2.0, 2.0).with_requires_grad(true);
    out.extend(rows(
        "softmax_cross_entropy",
        check_gradients(&none, &x, eps, |t, _, x| softmax_cross_entropy(t, x, &labels))?,
    ));

    // assembled network: all three heads reduced to one scalar. Batch
    // norm over three images amplifies 32-bit rounding far beyond the
    // layer tolerance, so this case runs in 64-bit only.
    if T::NAME != "f64" {
        return Ok(out);
    }
    let bb = tiny_backbone();
    let mut ps: ParamSet<T> = bb.init_params(&mut g.0);
    bb.init_seg_head(&mut ps, &mut g.0);
    let x = g.uniform::<T>(&[3, 1, 8, 8], -1.0, 1.0).with_requires_grad(true);
    let c = &bb.config;
    let w_pixel = g.uniform::<T>(&[3, c.pixel_dim, 8, 8], -1.0, 1.0);
    let w_global = g.uniform::<T>(&[3, c.projector_dim], -1.0, 1.0);
    let w_seg = g.uniform::<T>(&[3, c.seg_classes, 8, 8], -1.0, 1.0);
    out.extend(rows(
        "network",
        check_gradients(&ps, &x, eps, |t: &mut Tape<T>, v, x: Var| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut pass = Pass::new(t, &ps, v, ForwardMode::TRAIN, &mut r);
            let enc = bb.encode(&mut pass, x)?;
            let y = bb.decode(&mut pass, &enc)?;
            let pixel = bb.project_pixel(&mut pass, y)?;
            let global = bb.project_global(&mut pass, enc.z)?;
            let seg = bb.segment(&mut pass, y)?;
            let a = pass.tape.dot_const(pixel, &w_pixel)?;
            let b = pass.tape.dot_const(global, &w_global)?;
            let s = pass.tape.dot_const(seg, &w_seg)?;
            let ab = pass.tape.add(a, b)?;
            pass.tape.add(ab, s)
        })?,
    ));
    Ok(out)
}
