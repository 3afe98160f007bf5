//! SGD with momentum, Adam and LARS.

use indexmap::IndexMap;

use super::{ParamSet, Real};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Layer-wise trust ratio on top of momentum. Rank-0/1 tensors (biases,
    /// batch-norm affine terms) skip the adaptation and weight decay.
    Lars { momentum: f64, trust: f64, eps: f64 },
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, 0.0)
    }

    pub fn adam(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self::new(OptimizerKind::Adam { beta1, beta2, eps }, 0.0)
    }

    pub fn lars(momentum: f64, trust: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Lars { momentum, trust, eps: 1e-9 }, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First-moment (momentum) buffer of a parameter, if one exists yet.
    pub fn momentum_buffer(&self, name: &str) -> Option<&[T]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every trainable tensor of `params` using the
    /// gradients stored on them. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            if !p.requires_grad() {
                continue;
            }
            if let Some(g) = p.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    bail!(Numeric, "non-finite gradient for parameter '{name}' at index {i}");
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let wd = self.weight_decay;
        for (name, p) in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let grad: Vec<T> = p.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n {
                bail!(Shape, "optimizer buffer for '{name}' has {} elements, parameter has {n}", m.len());
            }
            let rank = p.rank();
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let (mu, lr, wd) = (T::of(momentum), T::of(lr), T::of(wd));
                    for ((w, v), &g) in data.iter_mut().zip(m.iter_mut()).zip(&grad) {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v2 = self.second.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let (one, eps, lr) = (T::one(), T::of(eps), T::of(lr));
                    let (c1, c2) = (T::of(c1), T::of(c2));
                    for (((w, mv), vv), &g) in data.iter_mut().zip(m.iter_mut()).zip(v2.iter_mut()).zip(&grad) {
                        *mv = b1 * *mv + (one - b1) * g;
                        *vv = b2 * *vv + (one - b2) * g * g;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::Lars { momentum, trust, eps } => {
                    let mu = T::of(momentum);
                    if rank <= 1 {
                        let lr = T::of(lr);
                        for ((w, v), &g) in data.iter_mut().zip(m.iter_mut()).zip(&grad) {
                            *v = mu * *v + lr * g;
                            *w -= *v;
                        }
                    } else {
                        let pn = data.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                        let gn = grad.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                        let local = if pn > 0.0 && gn > 0.0 {
                            trust * pn / (gn + wd * pn + eps)
                        } else {
                            1.0
                        };
                        let scale = T::of(lr * local);
                        let wd = T::of(wd);
                        for ((w, v), &g) in data.iter_mut().zip(m.iter_mut()).zip(&grad) {
                            *v = mu * *v + scale * (g + wd * *w);
                            *w -= *v;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
