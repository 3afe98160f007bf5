//! Encoder–decoder backbone shared by student and teacher, with the global
//! projector, the pixel projector and the segmentation head.
//!
//! Encoder: a conv–BN–ReLU stem followed by `depth` residual stages, each
//! halving the resolution and doubling the width. Decoder: per stage a
//! nearest-neighbour 2× upsample, conv–BN, an additive skip from the
//! matching encoder level, ReLU and dropout. The decoder output has
//! `base_width` channels at input resolution.

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::tape::BatchStats;
use crate::tensor::{BnMode, ParamSet, ParamVars, Real, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channels of the first stage and of the decoder output.
    pub base_width: usize,
    /// Number of down/up stages.
    pub depth: usize,
    /// Global projector output size `K_g`.
    pub projector_dim: usize,
    pub projector_hidden: usize,
    /// Pixel projector output size `K_p`.
    pub pixel_dim: usize,
    /// Rate of the dropout layers after each decoder stage.
    pub dropout_rate: f64,
    pub seg_classes: usize,
    /// Softmax temperature of both projectors.
    pub temperature: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            depth: 2,
            projector_dim: 64,
            projector_hidden: 64,
            pixel_dim: 16,
            dropout_rate: 0.1,
            seg_classes: 4,
            temperature: 1.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            bail!(Config, "model.depth must be at least 2, got {}", self.depth);
        }
        if self.projector_dim < 2 || self.pixel_dim < 2 {
            bail!(Config, "projector sizes must be at least 2 (K_g={}, K_p={})", self.projector_dim, self.pixel_dim);
        }
        if self.in_channels == 0 || self.base_width == 0 || self.projector_hidden == 0 || self.seg_classes < 2 {
            bail!(Config, "model widths must be positive and seg_classes at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "ssl.dropout_rate must lie in [0, 1), got {}", self.dropout_rate);
        }
        if !(self.temperature > 0.0) {
            bail!(Config, "proj.temperature must be positive");
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Side lengths must be divisible by this.
    pub fn stride_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// How a forward pass treats batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub bn: BnMode,
    /// Whether batch statistics are folded into the running estimates.
    pub update_running: bool,
    pub dropout: bool,
}

impl ForwardMode {
    /// Gradient-trained network.
    pub const TRAIN: Self = Self {
        bn: BnMode::Batch,
        update_running: true,
        dropout: true,
    };
    /// Inference with running statistics and no dropout.
    pub const EVAL: Self = Self {
        bn: BnMode::Running,
        update_running: false,
        dropout: false,
    };
    /// EMA teacher: batch statistics, nothing stored, no dropout.
    pub const TEACHER: Self = Self {
        bn: BnMode::Batch,
        update_running: false,
        dropout: false,
    };
    /// Teacher with dropout active, for MC-dropout sampling.
    pub const TEACHER_MC: Self = Self {
        bn: BnMode::Batch,
        update_running: false,
        dropout: true,
    };
}

/// One forward pass through a parameter set on a tape.
pub struct Pass<'a, T: Real, R: Rng + ?Sized> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamSet<T>,
    vars: &'a ParamVars,
    pub mode: ForwardMode,
    rng: &'a mut R,
    updates: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real, R: Rng + ?Sized> Pass<'a, T, R> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamSet<T>, vars: &'a ParamVars, mode: ForwardMode, rng: &'a mut R) -> Self {
        Self {
            tape,
            params,
            vars,
            mode,
            rng,
            updates: Vec::new(),
        }
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, bias: bool) -> Result<Var> {
        let k = self.var(&format!("{name}.weight"))?;
        let b = if bias { Some(self.var(&format!("{name}.bias"))?) } else { None };
        let kh = self.tape.shape(k)[2];
        self.tape.conv2d(x, k, b, stride, kh / 2)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let g = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        let running = match self.mode.bn {
            BnMode::Running => Some((
                self.params.require(&format!("{name}.running_mean"))?.data(),
                self.params.require(&format!("{name}.running_var"))?.data(),
            )),
            BnMode::Batch => None,
        };
        let (y, stats) = self.tape.batch_norm(x, g, b, self.mode.bn, running, T::of(BN_EPS))?;
        if let (Some(stats), true) = (stats, self.mode.update_running) {
            self.updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let active = self.mode.dropout;
        self.tape.dropout(x, rate, self.rng, active)
    }

    /// Batch statistics gathered so far, to be folded into running
    /// estimates with [`apply_running_updates`].
    pub fn finish(self) -> Vec<(String, BatchStats<T>)> {
        self.updates
    }
}

/// Folds batch statistics into the running estimates (momentum 0.1).
pub fn apply_running_updates<T: Real>(params: &mut ParamSet<T>, updates: &[(String, BatchStats<T>)]) -> Result<()> {
    let m = T::of(BN_MOMENTUM);
    let keep = T::one() - m;
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = format!("{name}.{suffix}");
            let Some(t) = params.get_mut(&key) else {
                bail!(Param, "missing running statistic '{key}'");
            };
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
    Ok(())
}

/// Encoder output: bottleneck plus the skip tensors of levels
/// `0..depth` (full resolution first).
pub struct Encoded {
    pub z: Var,
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
}

fn he_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound))).with_requires_grad(true)
}

fn insert_bn<T: Real>(ps: &mut ParamSet<T>, name: &str, c: usize) {
    ps.insert(format!("{name}.weight"), Tensor::ones(&[c]).with_requires_grad(true));
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[c]).with_requires_grad(true));
    ps.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    ps.insert(format!("{name}.running_var"), Tensor::ones(&[c]));
}

fn insert_conv<T: Real, R: Rng + ?Sized>(ps: &mut ParamSet<T>, rng: &mut R, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
    let fan_in = cin * k * k;
    ps.insert(format!("{name}.weight"), he_uniform(rng, &[cout, cin, k, k], fan_in));
    if bias {
        ps.insert(format!("{name}.bias"), Tensor::zeros(&[cout]).with_requires_grad(true));
    }
}

/// Parameter-name prefixes kept when a pretrained backbone is fine-tuned.
pub const BACKBONE_PREFIXES: [&str; 2] = ["enc.", "dec."];

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Encoder, decoder and both projectors.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let c = &self.config;
        let mut ps = ParamSet::new();
        insert_conv(&mut ps, rng, "enc.stem.conv", c.width(0), c.in_channels, 3, false);
        insert_bn(&mut ps, "enc.stem.bn", c.width(0));
        for k in 1..=c.depth {
            let (wi, wo) = (c.width(k - 1), c.width(k));
            insert_conv(&mut ps, rng, &format!("enc.down{k}.conv1"), wo, wi, 3, false);
            insert_bn(&mut ps, &format!("enc.down{k}.bn1"), wo);
            insert_conv(&mut ps, rng, &format!("enc.down{k}.conv2"), wo, wo, 3, false);
            insert_bn(&mut ps, &format!("enc.down{k}.bn2"), wo);
        }
        for k in (1..=c.depth).rev() {
            insert_conv(&mut ps, rng, &format!("dec.up{k}.conv"), c.width(k - 1), c.width(k), 3, false);
            insert_bn(&mut ps, &format!("dec.up{k}.bn"), c.width(k - 1));
        }
        let zc = c.width(c.depth);
        ps.insert("proj_g.fc1.weight", he_uniform(rng, &[c.projector_hidden, zc], zc));
        insert_bn(&mut ps, "proj_g.bn", c.projector_hidden);
        ps.insert("proj_g.fc2.weight", he_uniform(rng, &[c.projector_dim, c.projector_hidden], c.projector_hidden));
        ps.insert("proj_g.fc2.bias", Tensor::zeros(&[c.projector_dim]).with_requires_grad(true));
        let f = c.width(0);
        insert_conv(&mut ps, rng, "proj_p.conv1", f, f, 1, false);
        insert_bn(&mut ps, "proj_p.bn", f);
        insert_conv(&mut ps, rng, "proj_p.conv2", c.pixel_dim, f, 1, true);
        ps
    }

    /// Freshly initialized segmentation head, added to `ps`.
    pub fn init_seg_head<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        let c = &self.config;
        insert_conv(ps, rng, "head.conv", c.seg_classes, c.width(0), 1, true);
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let m = c.stride_multiple();
        match *shape {
            [_, ch, h, w] if ch == c.in_channels => {
                if h % m != 0 || w % m != 0 {
                    bail!(Shape, "input {h}x{w} is not divisible by 2^depth = {m}");
                }
                Ok(())
            }
            _ => bail!(Shape, "expected [N, {}, H, W] input, got {shape:?}", c.in_channels),
        }
    }

    pub fn encode<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, x: Var) -> Result<Encoded> {
        self.check_input_shape(pass.tape.shape(x))?;
        let h = pass.conv("enc.stem.conv", x, 1, false)?;
        let h = pass.bn("enc.stem.bn", h)?;
        let mut cur = pass.tape.relu(h)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for k in 1..=self.config.depth {
            skips.push(cur);
            let p = format!("enc.down{k}");
            let h = pass.conv(&format!("{p}.conv1"), cur, 2, false)?;
            let h = pass.bn(&format!("{p}.bn1"), h)?;
            let h = pass.tape.relu(h)?;
            let r = pass.conv(&format!("{p}.conv2"), h, 1, false)?;
            let r = pass.bn(&format!("{p}.bn2"), r)?;
            let s = pass.tape.add(h, r)?;
            cur = pass.tape.relu(s)?;
        }
        Ok(Encoded { z: cur, skips })
    }

    pub fn decode<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, enc: &Encoded) -> Result<Var> {
        let prefix = self.decode_prefix(pass, enc)?;
        self.decode_suffix(pass, enc, prefix)
    }

    /// Deepest decoder stage up to its dropout. Nothing before the first
    /// dropout is random, so MC-dropout passes can share this node.
    pub fn decode_prefix<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, enc: &Encoded) -> Result<Var> {
        let depth = self.config.depth;
        if enc.skips.len() != depth {
            bail!(Shape, "decoder expects {depth} skip tensors, got {}", enc.skips.len());
        }
        self.decode_stage(pass, enc.z, depth, enc.skips[depth - 1])
    }

    /// Remaining decoder stages, starting from [`Backbone::decode_prefix`].
    pub fn decode_suffix<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, enc: &Encoded, prefix: Var) -> Result<Var> {
        let mut cur = pass.dropout(prefix, self.config.dropout_rate)?;
        for k in (1..self.config.depth).rev() {
            let h = self.decode_stage(pass, cur, k, enc.skips[k - 1])?;
            cur = pass.dropout(h, self.config.dropout_rate)?;
        }
        Ok(cur)
    }

    fn decode_stage<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, cur: Var, k: usize, skip: Var) -> Result<Var> {
        let u = pass.tape.upsample2x(cur)?;
        let h = pass.conv(&format!("dec.up{k}.conv"), u, 1, false)?;
        let h = pass.bn(&format!("dec.up{k}.bn"), h)?;
        if pass.tape.shape(h) != pass.tape.shape(skip) {
            bail!(Shape, "skip at level {} has shape {:?}, decoder produced {:?}", k - 1, pass.tape.shape(skip), pass.tape.shape(h));
        }
        let h = pass.tape.add(h, skip)?;
        pass.tape.relu(h)
    }

    fn temperature<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, logits: Var) -> Result<Var> {
        if self.config.temperature == 1.0 {
            Ok(logits)
        } else {
            pass.tape.scale(logits, T::of(1.0 / self.config.temperature))
        }
    }

    /// `[N, C, h, w]` bottleneck → `[N, K_g]` probabilities.
    pub fn project_global<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, z: Var) -> Result<Var> {
        let p = pass.tape.global_avg_pool(z)?;
        let w1 = pass.var("proj_g.fc1.weight")?;
        let h = pass.tape.linear(p, w1, None)?;
        let h = pass.bn("proj_g.bn", h)?;
        let h = pass.tape.relu(h)?;
        let (w2, b2) = (pass.var("proj_g.fc2.weight")?, pass.var("proj_g.fc2.bias")?);
        let logits = pass.tape.linear(h, w2, Some(b2))?;
        let logits = self.temperature(pass, logits)?;
        pass.tape.softmax(logits, 1)
    }

    /// `[N, F, H, W]` features → `[N, K_p, H, W]` per-pixel probabilities.
    pub fn project_pixel<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, y: Var) -> Result<Var> {
        let h = pass.conv("proj_p.conv1", y, 1, false)?;
        let h = pass.bn("proj_p.bn", h)?;
        let h = pass.tape.relu(h)?;
        let logits = pass.conv("proj_p.conv2", h, 1, true)?;
        let logits = self.temperature(pass, logits)?;
        pass.tape.softmax(logits, 1)
    }

    /// `[N, F, H, W]` features → `[N, classes, H, W]` logits.
    pub fn segment<T: Real, R: Rng + ?Sized>(&self, pass: &mut Pass<'_, T, R>, y: Var) -> Result<Var> {
        pass.conv("head.conv", y, 1, true)
    }
}

/// Student and EMA-teacher parameters over one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct DualNetworkState {
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
}

impl DualNetworkState {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ParamSet<f32>) -> Self {
        let teacher = student.clone();
        Self { student, teacher }
    }

    pub fn init<R: Rng + ?Sized>(backbone: &Backbone, rng: &mut R) -> Self {
        Self::new(backbone.init_params(rng))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.student.same_schema(&self.teacher) {
            bail!(Shape, "student and teacher parameter schemas differ");
        }
        Ok(())
    }
}
