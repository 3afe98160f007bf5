use std::collections::BTreeSet;

use pgssl::gradsuite::{gradient_suite, settings, SuiteRow, TOL_F32, TOL_F64};
use pgssl::Real;

fn run<T: Real>(seeds: u64) -> Vec<SuiteRow> {
    (0..seeds).flat_map(|s| gradient_suite::<T>(s).unwrap()).collect()
}

fn failures(rows: &[SuiteRow], tol: f64) -> Vec<String> {
    rows.iter()
        .filter(|r| !(r.max_rel_error < tol))
        .map(|r| format!("{}/{}: {:.3e}", r.case, r.tensor, r.max_rel_error))
        .collect()
}

#[test]
fn every_layer_and_loss_passes_in_64_bit_over_20_seeds() {
    let rows = run::<f64>(20);
    assert_eq!(settings::<f64>().1, TOL_F64);
    let bad = failures(&rows, TOL_F64);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn every_layer_and_loss_passes_in_32_bit_over_20_seeds() {
    let rows = run::<f32>(20);
    assert_eq!(settings::<f32>().1, TOL_F32);
    let bad = failures(&rows, TOL_F32);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn suite_covers_layers_and_losses() {
    let cases: BTreeSet<&str> = gradient_suite::<f64>(0).unwrap().iter().map(|r| r.case).collect();
    for want in [
        "linear",
        "conv2d_3x3",
        "conv2d_stride2",
        "batch_norm_batch",
        "batch_norm_running",
        "relu",
        "dropout",
        "softmax",
        "global_avg_pool",
        "upsample2x",
        "global_loss",
        "local_loss_plain",
        "local_loss_full",
        "softmax_cross_entropy",
        "network",
    ] {
        assert!(cases.contains(want), "missing {want}");
    }
}
