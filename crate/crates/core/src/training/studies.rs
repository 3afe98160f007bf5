//! Semi-supervised runs, low-resource holdout studies and the ablation
//! ladder.

use rand::seq::SliceRandom;

use crate::augment::AugConfig;
use crate::backbone::{Backbone, DualNetworkState};
use crate::data::metrics::MetricRecord;
use crate::data::Sample;
use crate::error::{bail, Result};
use crate::objectives::Ablation;
use crate::rng;
use crate::tensor::{ParamSet, Tensor};

use super::finetune::{evaluate, finetune, initial_params, FinetuneConfig, FinetuneResult};
use super::pretrain::{pretrain, PretrainConfig, PretrainReport};

/// Keeps a `fraction` of the distinct cases (rounded, at least one is
/// required). Subsets for smaller fractions are contained in those for
/// larger ones; `1.0` returns every sample in its original order.
pub fn subsample_cases(samples: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(Config, "fraction {fraction} outside (0, 1]");
    }
    if fraction == 1.0 {
        return Ok(samples.to_vec());
    }
    let mut cases: Vec<&str> = Vec::new();
    for s in samples {
        if !cases.contains(&s.case_id.as_str()) {
            cases.push(&s.case_id);
        }
    }
    let keep = (fraction * cases.len() as f64).round() as usize;
    if keep == 0 {
        bail!(Data, "fraction {fraction} of {} cases keeps none", cases.len());
    }
    cases.shuffle(&mut rng::stream(seed, "holdout", 0));
    let chosen = &cases[..keep];
    Ok(samples.iter().filter(|s| chosen.contains(&s.case_id.as_str())).cloned().collect())
}

fn images_of(samples: &[Sample]) -> Vec<Tensor<f32>> {
    samples.iter().map(|s| s.image.clone()).collect()
}

/// Outcome of pretraining followed by fine-tuning.
pub struct SemiOutcome {
    pub state: DualNetworkState,
    pub pretrain: PretrainReport,
    pub finetune: FinetuneResult,
    pub test: MetricRecord,
}

/// Pretrains on the training images (labels ignored), then fine-tunes
/// from the student.
#[allow(clippy::too_many_arguments)]
pub fn semi_supervised_run(
    backbone: &Backbone,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    aug: &AugConfig,
    pre_cfg: &PretrainConfig,
    fine_cfg: &FinetuneConfig,
    on_step: &mut dyn FnMut(&super::TraceRow),
) -> Result<SemiOutcome> {
    let mut state = DualNetworkState::new(initial_params(backbone, pre_cfg.seed));
    let report = pretrain(backbone, &images_of(train), aug, pre_cfg, &mut state, on_step)?;
    let ft = finetune(backbone, train, val, Some(&state.student), fine_cfg)?;
    let test_metrics = evaluate(backbone, &ft.params, test, None)?;
    Ok(SemiOutcome {
        state,
        pretrain: report,
        finetune: ft,
        test: test_metrics,
    })
}

#[derive(Clone, Debug)]
pub struct HoldoutRow {
    pub fraction: f64,
    pub cases: usize,
    pub val_dsc: f64,
    pub test: MetricRecord,
}

/// Fine-tunes from `init` on each fraction of the training cases.
pub fn holdout_study(
    backbone: &Backbone,
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    init: Option<&ParamSet<f32>>,
    fractions: &[f64],
    fine_cfg: &FinetuneConfig,
) -> Result<Vec<HoldoutRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        bail!(Config, "holdout fraction {f} outside (0, 1]");
    }
    fractions
        .iter()
        .map(|&fraction| {
            let cfg = FinetuneConfig {
                train_fraction: fraction,
                ..fine_cfg.clone()
            };
            let ft = finetune(backbone, train, val, init, &cfg)?;
            Ok(HoldoutRow {
                fraction,
                cases: ft.train_cases,
                val_dsc: ft.best_val_dsc,
                test: evaluate(backbone, &ft.params, test, None)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub final_global: f64,
    pub final_local: f64,
    pub val_dsc: f64,
    pub test: MetricRecord,
}

/// Pretrains once per mode from the same initialization, then fine-tunes
/// and evaluates each.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    backbone: &Backbone,
    unlabeled: &[Tensor<f32>],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    aug: &AugConfig,
    pre_cfg: &PretrainConfig,
    fine_cfg: &FinetuneConfig,
    modes: &[Ablation],
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&ablation| {
            let cfg = PretrainConfig {
                ablation,
                ..pre_cfg.clone()
            };
            let mut state = DualNetworkState::new(initial_params(backbone, cfg.seed));
            let report = pretrain(backbone, unlabeled, aug, &cfg, &mut state, &mut |_| {})?;
            let last = report.trace.last().map(|r| (r.loss.global, r.loss.local)).unwrap_or((0.0, 0.0));
            let ft = finetune(backbone, train, val, Some(&state.student), fine_cfg)?;
            Ok(AblationRow {
                ablation,
                final_global: last.0,
                final_local: last.1,
                val_dsc: ft.best_val_dsc,
                test: evaluate(backbone, &ft.params, test, None)?,
            })
        })
        .collect()
}
