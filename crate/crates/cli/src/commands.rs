use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pgssl::backbone::{Backbone, DualNetworkState};
use pgssl::checkpoint;
use pgssl::config::RunConfig;
use pgssl::data::io::{load_f32img, save_f32img, save_pgm};
use pgssl::data::metrics::METRICS_HEADER;
use pgssl::data::{generate_dataset, preprocess_hu, Dataset, MetricRecord, Sample, Split};
use pgssl::gradsuite::{gradient_suite, settings, SuiteRow};
use pgssl::objectives::{uncertainty_map, Ablation};
use pgssl::tensor::ParamSet;
use pgssl::training::finetune::initial_params;
use pgssl::training::{
    ablate, evaluate, finetune, holdout_study, prepared, pretrain, semi_supervised_run, FinetuneResult, TraceRow, TRACE_HEADER,
};
use pgssl::{Error, Real};

use crate::Common;

pub enum Failure {
    /// Bad invocation or configuration; exit code 1.
    Usage(String),
    /// Anything that fails once work has started; exit code 2.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// File < `--set` < dedicated flags.
fn build_config(name: &str, c: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    let mut set = |key: &str, value: &str| cfg.set(key, value).map_err(|e| usage(e.to_string()));
    for kv in &c.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(usage(format!("--set expects KEY=VALUE, got '{kv}'")));
        };
        set(k, v)?;
    }
    if let Some(seed) = c.seed {
        set("run.seed", &seed.to_string())?;
    }
    let (pre, fine) = match name {
        "pretrain" => (true, false),
        "finetune" | "holdout" => (false, true),
        "semi" | "ablate" => (true, true),
        _ => (false, false),
    };
    if let Some(e) = c.epochs {
        if pre {
            set("pretrain.epochs", &e.to_string())?;
        }
        if fine {
            set("finetune.epochs", &e.to_string())?;
        }
    }
    if let Some(b) = c.batch {
        if pre {
            set("pretrain.batch_size", &b.to_string())?;
        }
        if fine {
            set("finetune.batch_size", &b.to_string())?;
        }
    }
    if let Some(a) = &c.ablation {
        if name == "ablate" {
            return Err(usage("ablate always runs go, gp, gpc and full; drop --ablation"));
        }
        set("ssl.ablation", a)?;
    }
    if let Some(f) = &c.fractions {
        let list = if f.trim_start().starts_with('[') { f.clone() } else { format!("[{f}]") };
        set("holdout.fractions", &list)?;
    }
    if c.verify_f64 {
        set("engine.verify_f64", "true")?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run(name: &str, c: &Common) -> Outcome {
    let cfg = build_config(name, c)?;
    let needs = |flag: &str, v: &Option<PathBuf>| -> Outcome<PathBuf> { v.clone().ok_or_else(|| usage(format!("{name} needs --{flag}"))) };
    let inputs = match name {
        "eval" => (Some(needs("checkpoint", &c.checkpoint)?), None),
        "export-uncertainty" => (Some(needs("checkpoint", &c.checkpoint)?), Some(needs("image", &c.image)?)),
        _ => (None, None),
    };
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("config.txt"), cfg.render())?;
    let ctx = Ctx { cfg, out: c.out.clone(), data: c.data.clone(), init: c.init.clone() };
    match name {
        "synth" => ctx.synth(),
        "pretrain" => ctx.pretrain(),
        "finetune" => ctx.finetune(),
        "semi" => ctx.semi(),
        "holdout" => ctx.holdout(),
        "eval" => ctx.eval(&inputs.0.expect("checked above")),
        "gradcheck" => ctx.gradcheck(),
        "ablate" => ctx.ablate(),
        "export-uncertainty" => ctx.export_uncertainty(&inputs.0.expect("checked above"), &inputs.1.expect("checked above")),
        other => Err(usage(format!("unknown subcommand '{other}'"))),
    }
}

struct Splits {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

impl Splits {
    fn train_images(&self) -> Vec<pgssl::Tensor<f32>> {
        self.train.iter().map(|s| s.image.clone()).collect()
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    data: Option<PathBuf>,
    init: Option<String>,
}

impl Ctx {
    fn backbone(&self) -> Outcome<Backbone> {
        Ok(Backbone::new(self.cfg.model.clone())?)
    }

    fn dataset(&self) -> Outcome<Dataset> {
        match &self.data {
            Some(p) => {
                let manifest = if p.is_dir() { p.join("manifest.csv") } else { p.clone() };
                log::info!("loading {}", manifest.display());
                Ok(Dataset::load(&manifest)?)
            }
            None => {
                let c = &self.cfg;
                let n = c.synth_train + c.synth_val + c.synth_test;
                log::info!("generating {n} synthetic scenes (seed {})", c.seed);
                let scenes = generate_dataset(n, &c.synth, c.seed)?;
                Ok(Dataset::from_scenes(scenes, c.synth_train, c.synth_val))
            }
        }
    }

    fn splits(&self) -> Outcome<Splits> {
        let ds = self.dataset()?;
        let clip = self.cfg.hu_clip;
        Ok(Splits {
            train: prepared(&ds, Split::Train, clip)?,
            val: prepared(&ds, Split::Val, clip)?,
            test: prepared(&ds, Split::Test, clip)?,
        })
    }

    /// Encoder/decoder source for fine-tuning: `None` for random.
    fn init_params(&self) -> Outcome<Option<ParamSet<f32>>> {
        match self.init.as_deref() {
            None | Some("random") => Ok(None),
            Some(path) => Ok(Some(load_backbone_source(Path::new(path))?)),
        }
    }

    fn write(&self, file: &str, text: &str) -> Outcome {
        fs::write(self.out.join(file), text)?;
        log::info!("wrote {}", self.out.join(file).display());
        Ok(())
    }

    fn write_trace(&self, trace: &[TraceRow]) -> Outcome {
        let mut s = format!("{TRACE_HEADER}\n");
        for row in trace {
            s.push_str(&row.csv());
            s.push('\n');
        }
        self.write("trace.csv", &s)
    }

    fn write_finetune(&self, bb: &Backbone, ft: &FinetuneResult, splits: &Splits) -> Outcome {
        let mut s = String::from("epoch,train_loss,val_dsc\n");
        for r in &ft.history {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.val_dsc);
        }
        self.write("finetune_history.csv", &s)?;
        checkpoint::save_params(&self.out.join("finetune_best.ckpt"), &ft.params)?;
        checkpoint::save_params(&self.out.join("finetune_final.ckpt"), &ft.final_params)?;
        log::info!("best validation DSC {:.4} at epoch {}", ft.best_val_dsc, ft.best_epoch);
        self.write_metrics(bb, &ft.params, &[("val", &splits.val), ("test", &splits.test)])
    }

    fn write_metrics(&self, bb: &Backbone, params: &ParamSet<f32>, sets: &[(&str, &[Sample])]) -> Outcome {
        let mut s = format!("{METRICS_HEADER}\n");
        for (split, samples) in sets {
            if samples.is_empty() {
                continue;
            }
            let rec = evaluate(bb, params, samples, self.cfg.spacing)?;
            log::info!("{split}: mean DSC {:.4}", rec.mean_dsc());
            for row in rec.csv_rows(split) {
                s.push_str(&row);
                s.push('\n');
            }
        }
        self.write("metrics.csv", &s)
    }

    fn synth(&self) -> Outcome {
        let ds = self.dataset()?;
        let manifest = ds.save(&self.out)?;
        log::info!("wrote {} scenes, manifest {}", ds.samples.len(), manifest.display());
        Ok(())
    }

    fn pretrain(&self) -> Outcome {
        let bb = self.backbone()?;
        let splits = self.splits()?;
        let cfg = self.cfg.pretrain_config();
        let mut state = match self.init.as_deref() {
            None | Some("random") => DualNetworkState::new(initial_params(&bb, cfg.seed)),
            Some(path) => DualNetworkState::load(Path::new(path))?,
        };
        let report = pretrain(&bb, &splits.train_images(), &self.cfg.aug, &cfg, &mut state, &mut log_step)?;
        self.write_trace(&report.trace)?;
        state.save(&self.out.join("pretrain_final.ckpt"))?;
        log::info!("embedding std {:.6}", report.embedding_std);
        Ok(())
    }

    fn finetune(&self) -> Outcome {
        let bb = self.backbone()?;
        let splits = self.splits()?;
        let init = self.init_params()?;
        let ft = finetune(&bb, &splits.train, &splits.val, init.as_ref(), &self.cfg.finetune_config())?;
        self.write_finetune(&bb, &ft, &splits)
    }

    fn semi(&self) -> Outcome {
        let bb = self.backbone()?;
        let splits = self.splits()?;
        let outcome = semi_supervised_run(
            &bb,
            &splits.train,
            &splits.val,
            &splits.test,
            &self.cfg.aug,
            &self.cfg.pretrain_config(),
            &self.cfg.finetune_config(),
            &mut log_step,
        )?;
        self.write_trace(&outcome.pretrain.trace)?;
        outcome.state.save(&self.out.join("pretrain_final.ckpt"))?;
        self.write_finetune(&bb, &outcome.finetune, &splits)
    }

    fn holdout(&self) -> Outcome {
        let bb = self.backbone()?;
        let splits = self.splits()?;
        let init = self.init_params()?;
        let rows = holdout_study(
            &bb,
            &splits.train,
            &splits.val,
            &splits.test,
            init.as_ref(),
            &self.cfg.holdout_fractions,
            &self.cfg.finetune_config(),
        )?;
        let mut s = String::from("fraction,cases,val_dsc,test_dsc,test_hd_mm\n");
        let mut m = format!("{METRICS_HEADER}\n");
        for r in &rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.fraction, r.cases, r.val_dsc, r.test.mean_dsc(), fmt_hd(&r.test));
            for row in r.test.csv_rows(&format!("test@{}", r.fraction)) {
                m.push_str(&row);
                m.push('\n');
            }
        }
        self.write("holdout.csv", &s)?;
        self.write("metrics.csv", &m)
    }

    fn eval(&self, ckpt: &Path) -> Outcome {
        let bb = self.backbone()?;
        let splits = self.splits()?;
        let params = checkpoint::load_params(ckpt)?;
        if params.get("head.conv.weight").is_none() {
            return Err(Failure::Runtime(format!("{} holds no segmentation head; fine-tune it first", ckpt.display())));
        }
        if splits.val.is_empty() && splits.test.is_empty() {
            return Err(Failure::Runtime("dataset has no validation or test cases".into()));
        }
        self.write_metrics(&bb, &params, &[("val", &splits.val), ("test", &splits.test)])
    }

    fn gradcheck(&self) -> Outcome {
        if self.cfg.verify_f64 {
            self.gradcheck_in::<f64>()
        } else {
            self.gradcheck_in::<f32>()
        }
    }

    fn gradcheck_in<T: Real>(&self) -> Outcome {
        let (eps, tol) = settings::<T>();
        let rows: Vec<SuiteRow> = gradient_suite::<T>(self.cfg.seed)?;
        let mut csv = String::from("case,tensor,max_rel_error,tolerance,pass\n");
        let mut cases: Vec<(&str, f64)> = Vec::new();
        for r in &rows {
            let _ = writeln!(csv, "{},{},{:e},{:e},{}", r.case, r.tensor, r.max_rel_error, tol, r.max_rel_error < tol);
            match cases.iter_mut().find(|(c, _)| *c == r.case) {
                Some((_, worst)) => *worst = worst.max(r.max_rel_error),
                None => cases.push((r.case, r.max_rel_error)),
            }
        }
        self.write("gradcheck.csv", &csv)?;
        println!("{} precision, step {eps:e}, tolerance {tol:e}", T::NAME);
        println!("{:<24} {:>14}  status", "layer", "max rel error");
        for (case, worst) in &cases {
            println!("{case:<24} {worst:>14.3e}  {}", if *worst < tol { "ok" } else { "FAIL" });
        }
        let failed = cases.iter().filter(|(_, w)| *w >= tol).count();
        if failed > 0 {
            return Err(Failure::Runtime(format!("{failed} of {} gradient checks exceed {tol:e}", cases.len())));
        }
        Ok(())
    }

    fn ablate(&self) -> Outcome {
        let bb = self.backbone()?;
        let splits = self.splits()?;
        let rows = ablate(
            &bb,
            &splits.train_images(),
            &splits.train,
            &splits.val,
            &splits.test,
            &self.cfg.aug,
            &self.cfg.pretrain_config(),
            &self.cfg.finetune_config(),
            &Ablation::ALL,
        )?;
        let classes = rows.first().map_or(0, |r| r.test.dsc.len());
        let mut s = String::from("ablation,final_global,final_local,val_dsc,test_dsc,test_hd_mm");
        for k in 1..=classes {
            let _ = write!(s, ",test_dsc_{k}");
        }
        s.push('\n');
        for r in &rows {
            let _ = write!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                r.ablation,
                r.final_global,
                r.final_local,
                r.val_dsc,
                r.test.mean_dsc(),
                fmt_hd(&r.test)
            );
            for d in &r.test.dsc {
                let _ = write!(s, ",{d:.6}");
            }
            s.push('\n');
            log::info!("{}: test DSC {:.4}", r.ablation, r.test.mean_dsc());
        }
        self.write("ablation.csv", &s)
    }

    fn export_uncertainty(&self, ckpt: &Path, image: &Path) -> Outcome {
        let bb = self.backbone()?;
        let state = DualNetworkState::load(ckpt)?;
        let raw = load_f32img(image)?;
        let x = preprocess_hu(&raw, self.cfg.hu_clip.0, self.cfg.hu_clip.1)?;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let x = x.reshape(&[1, c, h, w])?;
        let u = uncertainty_map(&bb, &state.teacher, &x, self.cfg.pretrain.mc_passes, self.cfg.seed)?;
        let u = u.reshape(&[1, h, w])?;
        save_pgm(&self.out.join("uncertainty.pgm"), u.data(), h, w, 0.0, 1.0)?;
        save_f32img(&self.out.join("uncertainty.f32img"), &u)?;
        let mean = u.data().iter().map(|&v| v as f64).sum::<f64>() / u.numel() as f64;
        log::info!("mean uncertainty {mean:.4}; wrote uncertainty.pgm and uncertainty.f32img");
        Ok(())
    }
}

fn fmt_hd(rec: &MetricRecord) -> String {
    rec.mean_hd().map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

fn log_step(row: &TraceRow) {
    if row.step % 10 == 0 {
        log::info!(
            "step {}: loss {:.5} (global {:.5}, local {:.5}) lambda {:.6} lr {:.5}",
            row.step,
            row.loss.total,
            row.loss.global,
            row.loss.local,
            row.lambda,
            row.lr
        );
    }
}

/// Student weights of a pretraining checkpoint, or a plain parameter
/// checkpoint as is.
fn load_backbone_source(path: &Path) -> pgssl::Result<ParamSet<f32>> {
    let bytes = fs::read(path)?;
    let dual = checkpoint::decode(&bytes)?.iter().any(|(name, _)| name.starts_with("student."));
    if dual {
        Ok(DualNetworkState::from_bytes(&bytes)?.student)
    } else {
        checkpoint::load_params(path)
    }
}
