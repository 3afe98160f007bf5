//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, ParamVars, Real, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Tensors larger than this are checked on an evenly strided subset.
const MAX_CHECKED: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|, 1e-8)`
    /// over the checked elements of the tensor.
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }

    pub fn get(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn checked_indices(n: usize) -> Vec<usize> {
    if n <= MAX_CHECKED {
        (0..n).collect()
    } else {
        (0..MAX_CHECKED).map(|i| i * n / MAX_CHECKED).collect()
    }
}

/// Compares tape gradients with central differences of step `eps`.
///
/// `build` receives the tape, the registered parameters and the input
/// handle and returns the output node. Non-scalar outputs are reduced with
/// a fixed random projection. Every parameter with `requires_grad` is
/// checked, and the input too when it requires a gradient (reported as
/// `"input"`). The forward pass must be deterministic.
pub fn check_gradients<T, F>(params: &ParamSet<T>, input: &Tensor<T>, eps: f64, build: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamVars, Var) -> Result<Var>,
{
    let mut projection: Option<Tensor<T>> = None;
    let mut eval = |ps: &ParamSet<T>, x: &Tensor<T>, grads: bool| -> Result<(f64, Option<(Tape<T>, ParamVars, Var, Var)>)> {
        let mut tape = Tape::new();
        let vars = ps.register(&mut tape, true);
        let xv = tape.leaf(x.clone());
        let out = build(&mut tape, &vars, xv)?;
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            let proj = projection.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
                Tensor::from_fn(tape.shape(out), |_| T::of(rng.random::<f64>() * 2.0 - 1.0))
            });
            tape.dot_const(out, proj)?
        };
        let value = tape.value(loss).item().as_f64();
        Ok((value, grads.then_some((tape, vars, xv, loss))))
    };

    let (f0, state) = eval(params, input, true)?;
    let (f1, _) = eval(params, input, false)?;
    if f0.to_bits() != f1.to_bits() {
        bail!(Determinism, "two evaluations of the same forward pass differ ({f0} vs {f1})");
    }
    let (tape, vars, xv, loss) = state.expect("gradients requested");
    let grads = tape.backward(loss)?;

    let mut targets: Vec<(String, Vec<T>)> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, _)| Ok((name.to_string(), grads.get_or_zeros(&tape, vars.get(name)?))))
        .collect::<Result<_>>()?;
    if input.requires_grad() {
        targets.push(("input".to_string(), grads.get_or_zeros(&tape, xv)));
    }

    let mut report = GradCheckReport::default();
    for (name, analytic) in targets {
        let idx = checked_indices(analytic.len());
        let mut worst = 0.0f64;
        let mut scale = 1e-8f64;
        for &i in &idx {
            let probe = |delta: f64, eval: &mut dyn FnMut(&ParamSet<T>, &Tensor<T>) -> Result<f64>| -> Result<f64> {
                if name == "input" {
                    let mut x = input.clone();
                    x.data_mut()[i] += T::of(delta);
                    eval(params, &x)
                } else {
                    let mut ps = params.clone();
                    ps.get_mut(&name).expect("listed above").data_mut()[i] += T::of(delta);
                    eval(&ps, input)
                }
            };
            let mut run = |ps: &ParamSet<T>, x: &Tensor<T>| eval(ps, x, false).map(|(v, _)| v);
            let plus = probe(eps, &mut run)?;
            let minus = probe(-eps, &mut run)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].as_f64();
            worst = worst.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        report.entries.push(GradCheckEntry {
            name,
            max_rel_error: worst / scale,
            checked: idx.len(),
        });
    }
    Ok(report)
}
