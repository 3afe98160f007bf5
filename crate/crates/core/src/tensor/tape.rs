//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its value and whatever it needs for
//! the backward rule. Because nodes can only reference earlier nodes, the
//! tape is topologically ordered by construction and a single reverse sweep
//! visits each node once.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Current batch statistics.
    Batch,
    /// Stored running statistics.
    Running,
}

/// Batch statistics produced by a batch-norm op in [`BnMode::Batch`]:
/// per-channel mean and unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: bool,
        dims: (usize, usize, usize),
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    GlobalAvgPool {
        x: Var,
        sp: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: (usize, usize, usize),
    },
    Upsample2x {
        x: Var,
        dims: (usize, usize, usize),
    },
    SliceBatch {
        x: Var,
        offset: usize,
    },
    /// Scalar whose local gradients were computed during the forward pass.
    Fused(Vec<(Var, Vec<T>)>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    label: &'static str,
}

/// Recorded forward computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Its `requires_grad` flag decides whether the
    /// backward pass produces a gradient for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            label: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, label: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        let bad = value
            .data()
            .chunks(256)
            .any(|c| c.iter().fold(false, |acc, v| acc | !v.is_finite()));
        if bad {
            let i = value.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            bail!(Numeric, "{label} produced a non-finite value at flat index {i}");
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            label,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, label: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{label}: operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_map(&mut self, label: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(label, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(label, out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect());
        self.push("scale", out, &[a], Op::Scale(a, c))
    }

    /// Rectifier. The derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
        );
        self.push("relu", out, &[a], Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(m), &[a], Op::Mean(a))
    }

    /// `Σ x ⊙ c` for a constant `c`; turns any output into a scalar for
    /// gradient checks.
    pub fn dot_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let v = self.value(a);
        if v.shape() != c.shape() {
            bail!(Shape, "dot_const: {:?} vs {:?}", v.shape(), c.shape());
        }
        let s = v.data().iter().zip(c.data()).map(|(&x, &y)| x * y).sum();
        self.push("dot_const", Tensor::scalar(s), &[a], Op::Fused(vec![(a, c.data().to_vec())]))
    }

    /// 2-D convolution with zero padding. `x` is `[N, Cin, H, W]`, `kernel`
    /// is `[Cout, Cin, kh, kw]` and the optional `bias` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(x).dims4()?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4()?;
        if stride == 0 {
            bail!(Param, "conv2d: stride must be positive");
        }
        if kcin != cin {
            bail!(Shape, "conv2d: input channels (axis 1) {cin} but kernel expects {kcin} (kernel axis 1)");
        }
        if kh > h + 2 * padding {
            bail!(Shape, "conv2d: kernel height (axis 2) {kh} exceeds padded input height {}", h + 2 * padding);
        }
        if kw > w + 2 * padding {
            bail!(Shape, "conv2d: kernel width (axis 3) {kw} exceeds padded input width {}", w + 2 * padding);
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                bail!(Shape, "conv2d: bias shape {:?} does not match {cout} output channels (axis 0)", self.shape(b));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::from_parts(vec![n, cout, geom.oh, geom.ow], data);
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        self.push("conv2d", out, &inputs, Op::Conv2d { x, k: kernel, b: bias, geom })
    }

    /// Batch normalization over `(N, spatial)` for each channel of an
    /// `[N, C, ...]` input. In [`BnMode::Batch`] the batch statistics are
    /// returned so the caller can update its running estimates; in
    /// [`BnMode::Running`] `running` must be supplied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            bail!(Shape, "batch_norm: expected [N, C, ...], got {shape:?}");
        }
        let (n, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Shape, "batch_norm: affine parameters must be [{c}] (channel axis 1)");
        }
        let m = n * sp;
        let (mean, var, stats) = match mode {
            BnMode::Batch => {
                if m < 2 {
                    bail!(DegenerateBatch, "batch_norm needs at least 2 values per channel, got {m}");
                }
                let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, sp);
                let unbiased = var.iter().map(|&v| v * T::of(m as f64) / T::of((m - 1) as f64)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Running => {
                let Some((rm, rv)) = running else {
                    bail!(Param, "batch_norm: running statistics required in running mode");
                };
                if rm.len() != c || rv.len() != c {
                    bail!(Shape, "batch_norm: running statistics must have {c} channels");
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * sp;
                for i in off..off + sp {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: mode == BnMode::Batch,
            dims: (n, c, sp),
        };
        let v = self.push("batch_norm", out, &[x, gamma, beta], op)?;
        Ok((v, stats))
    }

    /// Inverted dropout. Inactive or zero-rate dropout returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Param, "dropout rate must lie in [0, 1), got {rate}");
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("dropout", out, &[x], Op::Dropout { x, mask })
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Shape, "softmax: axis {axis} out of range for {shape:?}");
        }
        let data = kernels::softmax_forward(self.value(x).data(), &shape, axis);
        self.push("softmax", Tensor::from_parts(shape, data), &[x], Op::Softmax { x, axis })
    }

    /// `[N, C, H, W]` → `[N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let sp = h * w;
        let inv = T::of(1.0 / sp as f64);
        let v = self.value(x).data();
        let data = (0..n * c).map(|p| v[p * sp..][..sp].iter().copied().sum::<T>() * inv).collect();
        self.push("global_avg_pool", Tensor::from_parts(vec![n, c], data), &[x], Op::GlobalAvgPool { x, sp })
    }

    /// `[N, in] × [out, in]ᵀ + [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = match self.shape(x) {
            &[n, d] => (n, d),
            s => bail!(Shape, "linear: expected [N, in], got {s:?}"),
        };
        let dout = match self.shape(w) {
            &[o, i] if i == din => o,
            s => bail!(Shape, "linear: weight {s:?} incompatible with input width {din}"),
        };
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                bail!(Shape, "linear: bias {:?} must be [{dout}]", self.shape(b));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * dout];
        for r in 0..n {
            let xr = &xv[r * din..][..din];
            for o in 0..dout {
                let mut acc = T::zero();
                for (&a, &c) in xr.iter().zip(&wv[o * din..][..din]) {
                    acc += a * c;
                }
                if let Some(bv) = bv {
                    acc += bv[o];
                }
                out[r * dout + o] = acc;
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Linear { x, w, b, dims: (n, din, dout) };
        self.push("linear", Tensor::from_parts(vec![n, dout], out), &inputs, op)
    }

    /// Nearest-neighbour 2× spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let data = kernels::upsample2x(self.value(x).data(), n * c, h, w);
        let out = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], data);
        self.push("upsample2x", out, &[x], Op::Upsample2x { x, dims: (n * c, h, w) })
    }

    /// Batch entries `[start, start + len)` along axis 0.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let out = v.slice_batch(start, len)?;
        let offset = start * (v.numel() / v.shape()[0]);
        self.push("slice_batch", out, &[x], Op::SliceBatch { x, offset })
    }

    /// Appends a scalar whose gradient with respect to each listed input was
    /// already computed. Used for fused losses.
    pub fn fused_scalar(&mut self, label: &'static str, value: T, local_grads: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if g.len() != self.value(*v).numel() {
                bail!(Shape, "{label}: local gradient length {} for input of {} elements", g.len(), self.value(*v).numel());
            }
        }
        let inputs: Vec<Var> = local_grads.iter().map(|(v, _)| *v).collect();
        self.push(label, Tensor::scalar(value), &inputs, Op::Fused(local_grads))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", lv.shape());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        Self::accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let c = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, *a, c);
                }
                if self.wants(*b) {
                    let c = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, *b, c);
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let c = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    Self::accumulate(grads, *a, c);
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, vec![g[0]; val(*a).len()]);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = val(*a).len();
                    Self::accumulate(grads, *a, vec![g[0] / T::of(n as f64); n]);
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, kernels::conv2d_backward_input(g, val(*k), geom));
                }
                if self.wants(*k) {
                    Self::accumulate(grads, *k, kernels::conv2d_backward_kernel(g, val(*x), geom));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        Self::accumulate(grads, *b, kernels::conv2d_backward_bias(g, geom));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                dims: (n, c, sp),
            } => {
                let (n, c, sp) = (*n, *c, *sp);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * sp;
                        for i in off..off + sp {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = val(*gamma);
                    let m = T::of((n * sp) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for bi in 0..n {
                        for ch in 0..c {
                            let off = (bi * c + ch) * sp;
                            let s = gam[ch] * inv_std[ch];
                            for i in off..off + sp {
                                dx[i] = if *batch {
                                    s / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    s * g[i]
                                };
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    Self::accumulate(grads, *gamma, sum_gx);
                }
                if self.wants(*beta) {
                    Self::accumulate(grads, *beta, sum_g);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let d = kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis);
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::GlobalAvgPool { x, sp } => {
                if self.wants(*x) {
                    let inv = T::of(1.0 / *sp as f64);
                    let mut d = Vec::with_capacity(g.len() * sp);
                    for &gv in g {
                        d.extend(std::iter::repeat_n(gv * inv, *sp));
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Linear { x, w, b, dims: (n, din, dout) } => {
                let (n, din, dout) = (*n, *din, *dout);
                if self.wants(*x) {
                    let wv = val(*w);
                    let mut dx = vec![T::zero(); n * din];
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for (d, &c) in dx[r * din..][..din].iter_mut().zip(&wv[o * din..][..din]) {
                                *d += gv * c;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let xv = val(*x);
                    let mut dw = vec![T::zero(); dout * din];
                    for r in 0..n {
                        for o in 0..dout {
                            let gv = g[r * dout + o];
                            for (d, &a) in dw[o * din..][..din].iter_mut().zip(&xv[r * din..][..din]) {
                                *d += gv * a;
                            }
                        }
                    }
                    Self::accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for r in 0..n {
                            for (d, &gv) in db.iter_mut().zip(&g[r * dout..][..dout]) {
                                *d += gv;
                            }
                        }
                        Self::accumulate(grads, *b, db);
                    }
                }
            }
            Op::Upsample2x { x, dims: (planes, h, w) } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, kernels::upsample2x_backward(g, *planes, *h, *w));
                }
            }
            Op::SliceBatch { x, offset } => {
                if self.wants(*x) {
                    let mut d = vec![T::zero(); val(*x).len()];
                    d[*offset..*offset + g.len()].copy_from_slice(g);
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::Fused(locals) => {
                for (v, lg) in locals {
                    if self.wants(*v) {
                        Self::accumulate(grads, *v, lg.iter().map(|&d| d * g[0]).collect());
                    }
                }
            }
        }
    }

    /// Op label of a node, for diagnostics.
    pub fn label(&self, v: Var) -> &'static str {
        self.nodes[v.0].label
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when unreachable from the loss.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tape.value(v).numel()],
        }
    }
}
