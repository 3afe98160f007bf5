use pgssl::augment::AugConfig;
use pgssl::backbone::{Backbone, BackboneConfig, DualNetworkState};
use pgssl::data::{generate_dataset, Dataset, Sample, Split, SynthConfig, HU_CLIP};
use pgssl::objectives::Ablation;
use pgssl::training::finetune::initial_params;
use pgssl::training::*;
use proptest::prelude::*;

fn tiny() -> Backbone {
    Backbone::new(BackboneConfig { base_width: 4, projector_dim: 8, projector_hidden: 8, pixel_dim: 4, ..BackboneConfig::default() }).unwrap()
}

fn data(n: usize, train: usize, val: usize) -> Dataset {
    Dataset::from_scenes(generate_dataset(n, &SynthConfig::default(), 1).unwrap(), train, val)
}

fn images(ds: &Dataset) -> Vec<pgssl::Tensor<f32>> {
    prepared(ds, Split::Train, HU_CLIP).unwrap().into_iter().map(|s| s.image).collect()
}

fn short(ablation: Ablation) -> PretrainConfig {
    PretrainConfig { epochs: 1, batch_size: 4, warmup_epochs: 0, mc_passes: 3, ablation, seed: 4, ..PretrainConfig::default() }
}

#[test]
fn zero_epochs_leave_student_and_teacher_identical() {
    let bb = tiny();
    let imgs = images(&data(8, 8, 0));
    let mut state = DualNetworkState::new(initial_params(&bb, 0));
    let before = state.to_bytes().unwrap();
    let report = pretrain(&bb, &imgs, &AugConfig::default(), &PretrainConfig { epochs: 0, ..short(Ablation::Full) }, &mut state, &mut |_| {}).unwrap();
    assert!(report.trace.is_empty());
    assert_eq!(state.to_bytes().unwrap(), before);
    assert_eq!(state.student, state.teacher);
}

#[test]
fn pretraining_is_reproducible() {
    let bb = tiny();
    let imgs = images(&data(8, 8, 0));
    let run = || {
        let mut state = DualNetworkState::new(initial_params(&bb, 0));
        let r = pretrain(&bb, &imgs, &AugConfig::default(), &short(Ablation::Full), &mut state, &mut |_| {}).unwrap();
        (r, state.to_bytes().unwrap())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(a.trace.len(), 2);
}

#[test]
fn every_ablation_trains_and_reports_its_terms() {
    let bb = tiny();
    let imgs = images(&data(8, 8, 0));
    for ab in [Ablation::Go, Ablation::Gp, Ablation::Gpc, Ablation::Full] {
        let mut state = DualNetworkState::new(initial_params(&bb, 0));
        let start = state.student.clone();
        let r = pretrain(&bb, &imgs, &AugConfig::default(), &short(ab), &mut state, &mut |_| {}).unwrap();
        let last = &r.trace.last().unwrap().loss;
        assert!(last.global.is_finite() && last.global > 0.0, "{ab}");
        assert_eq!(last.local == 0.0, !ab.uses_local(), "{ab}");
        assert_eq!(last.mean_uncertainty > 0.0, ab.uses_uncertainty(), "{ab}");
        assert_eq!(last.total, last.global + last.local);
        assert_ne!(state.student, start, "{ab}");
        // the teacher moved towards the student but not onto it
        assert_ne!(state.teacher, start);
        assert_ne!(state.teacher, state.student);
        let first = &r.trace[0];
        assert_eq!(first.lambda, 0.996);
    }
}

#[test]
fn fine_tuning_restores_the_best_epoch() {
    let bb = tiny();
    let ds = data(16, 10, 3);
    let train = prepared(&ds, Split::Train, HU_CLIP).unwrap();
    let val = prepared(&ds, Split::Val, HU_CLIP).unwrap();
    let cfg = FinetuneConfig { epochs: 4, batch_size: 4, patience: 2, seed: 2, ..FinetuneConfig::default() };
    let r = finetune(&bb, &train, &val, None, &cfg).unwrap();
    assert!(!r.history.is_empty() && r.history.len() <= 4);
    let best = r.history.iter().map(|e| e.val_dsc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val_dsc, best);
    assert_eq!(r.history[r.best_epoch].val_dsc, best);
    let again = evaluate(&bb, &r.params, &val, None).unwrap().mean_dsc();
    assert!((again - best).abs() < 1e-12);
    let twice = finetune(&bb, &train, &val, None, &cfg).unwrap();
    assert_eq!(twice.history, r.history);
}

#[test]
fn fine_tuning_starts_from_a_pretrained_backbone() {
    let bb = tiny();
    let ds = data(12, 8, 4);
    let train = prepared(&ds, Split::Train, HU_CLIP).unwrap();
    let val = prepared(&ds, Split::Val, HU_CLIP).unwrap();
    let mut state = DualNetworkState::new(initial_params(&bb, 5));
    pretrain(&bb, &images(&ds), &AugConfig::default(), &short(Ablation::Go), &mut state, &mut |_| {}).unwrap();
    let cfg = FinetuneConfig { epochs: 1, batch_size: 4, seed: 2, ..FinetuneConfig::default() };
    let from_ssl = finetune(&bb, &train, &val, Some(&state.student), &cfg).unwrap();
    let from_scratch = finetune(&bb, &train, &val, None, &cfg).unwrap();
    assert_ne!(from_ssl.history[0].train_loss, from_scratch.history[0].train_loss);
}

fn cases(n: usize) -> Vec<Sample> {
    data(n, n, 0).samples
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn holdout_subsets_nest(seed in any::<u64>(), a in 0.05f64..1.0, b in 0.05f64..1.0) {
        let all = cases(20);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = subsample_cases(&all, lo, seed);
        let large = subsample_cases(&all, hi, seed).unwrap();
        if let Ok(small) = small {
            prop_assert!(small.iter().all(|s| large.iter().any(|t| t.case_id == s.case_id)));
            prop_assert_eq!(small.len(), (lo * 20.0).round() as usize);
        }
    }

    #[test]
    fn schedules_stay_in_range(step in 0u64..2000, total in 1u64..2000, warmup in 0u64..50, base in 0.0f64..1.0) {
        let lr = warmup_cosine_lr(step, total, warmup, base);
        prop_assert!((0.0..=base + 1e-12).contains(&lr));
        let p = poly_lr(step, total, base, 0.9);
        prop_assert!((0.0..=base).contains(&p));
        if step + 1 < total {
            prop_assert!(poly_lr(step + 1, total, base, 0.9) <= p);
        }
    }
}
