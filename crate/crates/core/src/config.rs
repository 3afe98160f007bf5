//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; arrays are bracketed
//! comma lists (`[0.1, 0.5, 1.0]`). Unknown keys are errors. [`RunConfig::render`]
//! prints every key with its resolved value so a run can be replayed from
//! its own echo.

use std::path::Path;
use std::str::FromStr;

use crate::augment::AugConfig;
use crate::backbone::BackboneConfig;
use crate::data::{SynthConfig, HU_CLIP};
use crate::error::{bail, Error, Result};
use crate::objectives::Ablation;
use crate::training::{FinetuneConfig, PretrainConfig};

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

fn scalar<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse '{s}'"))
}

fn list(s: &str) -> std::result::Result<Vec<&str>, String> {
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("expected a bracketed list, got '{s}'"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(inner.split(',').map(str::trim).collect())
}

fn render_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                scalar(s)
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool);

impl ConfigValue for Ablation {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        list(s)?.into_iter().map(scalar).collect()
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl ConfigValue for (f64, f64) {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match Vec::<f64>::parse(s)?.as_slice() {
            &[a, b] => Ok((a, b)),
            other => Err(format!("expected two values, got {}", other.len())),
        }
    }
    fn render(&self) -> String {
        render_list(&[self.0, self.1])
    }
}

impl ConfigValue for (f32, f32) {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        <(f64, f64)>::parse(s).map(|(a, b)| (a as f32, b as f32))
    }
    fn render(&self) -> String {
        format!("[{}, {}]", self.0, self.1)
    }
}

/// Band pairs written as one flat list `[lo0, hi0, lo1, hi1, ...]`.
impl ConfigValue for Vec<(f64, f64)> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let flat = Vec::<f64>::parse(s)?;
        if flat.len() % 2 != 0 {
            return Err(format!("expected an even number of values, got {}", flat.len()));
        }
        Ok(flat.chunks(2).map(|p| (p[0], p[1])).collect())
    }
    fn render(&self) -> String {
        render_list(&self.iter().flat_map(|&(a, b)| [a, b]).collect::<Vec<_>>())
    }
}

/// `none` or a positive number.
impl ConfigValue for Option<f64> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            scalar(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

/// Every setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub verify_f64: bool,
    pub model: BackboneConfig,
    pub aug: AugConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub synth: SynthConfig,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub hu_clip: (f32, f32),
    pub holdout_fractions: Vec<f64>,
    /// Pixel spacing for Hausdorff distances; `None` reports pixels.
    pub spacing: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            verify_f64: false,
            model: BackboneConfig::default(),
            aug: AugConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            synth: SynthConfig::default(),
            synth_train: 200,
            synth_val: 50,
            synth_test: 50,
            hu_clip: HU_CLIP,
            holdout_fractions: vec![0.1, 0.25, 0.5, 1.0],
            spacing: None,
        }
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in echo order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse(value)
                            .map_err(|e| Error::Config(format!("{}: {e}", $key)))?;
                    })*
                    other => bail!(Config, "unknown key '{other}'"),
                }
                Ok(())
            }

            /// `(key, value)` for every key.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

keys! {
    "run.seed" => seed;
    "engine.verify_f64" => verify_f64;
    "model.base_width" => model.base_width;
    "model.depth" => model.depth;
    "model.seg_classes" => model.seg_classes;
    "proj.global_dim" => model.projector_dim;
    "proj.global_hidden" => model.projector_hidden;
    "proj.pixel_dim" => model.pixel_dim;
    "proj.temperature" => model.temperature;
    "ssl.dropout_rate" => model.dropout_rate;
    "ssl.mc_passes" => pretrain.mc_passes;
    "ssl.lambda_start" => pretrain.lambda_start;
    "ssl.eq5_outer_abs" => pretrain.eq5_outer_abs;
    "ssl.ablation" => pretrain.ablation;
    "aug.crop_scale" => aug.crop_scale;
    "aug.out_size" => aug.out_size;
    "aug.rot90" => aug.rot90;
    "aug.hflip_prob" => aug.hflip_prob;
    "aug.vflip_prob" => aug.vflip_prob;
    "aug.contrast" => aug.contrast;
    "aug.gamma" => aug.gamma;
    "pretrain.epochs" => pretrain.epochs;
    "pretrain.batch_size" => pretrain.batch_size;
    "pretrain.base_lr" => pretrain.base_lr;
    "pretrain.warmup_epochs" => pretrain.warmup_epochs;
    "pretrain.momentum" => pretrain.momentum;
    "pretrain.weight_decay" => pretrain.weight_decay;
    "pretrain.trust" => pretrain.trust;
    "finetune.epochs" => finetune.epochs;
    "finetune.batch_size" => finetune.batch_size;
    "finetune.base_lr" => finetune.base_lr;
    "finetune.poly_power" => finetune.poly_power;
    "finetune.patience" => finetune.patience;
    "finetune.train_fraction" => finetune.train_fraction;
    "synth.side" => synth.side;
    "synth.classes" => synth.classes;
    "synth.class_prob" => synth.class_prob;
    "synth.radius" => synth.radius;
    "synth.bands" => synth.bands;
    "synth.noise_sigma" => synth.noise_sigma;
    "synth.blur_radius" => synth.blur_radius;
    "synth.train" => synth_train;
    "synth.val" => synth_val;
    "synth.test" => synth_test;
    "data.hu_clip" => hu_clip;
    "holdout.fractions" => holdout_fractions;
    "metrics.spacing" => spacing;
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(Config, "line {}: expected 'key = value', got '{line}'", i + 1);
            };
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, one `key = value` per line.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Pretraining settings with the run seed applied.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            ..self.finetune.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.synth.validate()?;
        self.aug.validate()?;
        if self.synth.classes > self.model.seg_classes {
            bail!(Config, "synth.classes ({}) exceeds model.seg_classes ({})", self.synth.classes, self.model.seg_classes);
        }
        if !(self.hu_clip.0 < self.hu_clip.1) {
            bail!(Config, "data.hu_clip must be an increasing pair");
        }
        if let Some(f) = self.holdout_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            bail!(Config, "holdout.fractions entry {f} outside (0, 1]");
        }
        if let Some(s) = self.spacing {
            if !(s > 0.0) {
                bail!(Config, "metrics.spacing must be positive or none");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("holdout.fractions", "[0.1, 1]").unwrap();
        cfg.set("metrics.spacing", "0.75").unwrap();
        cfg.set("ssl.ablation", "gpc").unwrap();
        let text = cfg.render();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_arrays() {
        let cfg = RunConfig::parse("# toy run\nrun.seed = 7  # trailing\n\naug.crop_scale = [0.5, 0.9]\nsynth.bands=[0,1,2,3,4,5,6,7]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.aug.crop_scale, (0.5, 0.9));
        assert_eq!(cfg.synth.bands[3], (6.0, 7.0));
        assert_eq!(cfg.pretrain_config().seed, 7);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        for text in ["pretrain.epoch = 3", "pretrain.epochs = three", "aug.crop_scale = [1]", "no equals sign", "ssl.ablation = most"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let err = RunConfig::parse("run.seed = 1\nbogus = 2").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }
}
