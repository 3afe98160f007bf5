//! Dice and Hausdorff distance on integer class masks.

use super::synth::Mask;
use crate::error::{bail, Result};

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        bail!(Shape, "mask shapes differ: {}x{} vs {}x{}", a.height, a.width, b.height, b.width);
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)` for one class; 1 when the class is absent from
/// both masks.
pub fn dice(pred: &Mask, gt: &Mask, class: u8) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Pixels of `class` with a 4-neighbour outside the class or outside the
/// image, as `(row, col)`.
pub fn boundary(mask: &Mask, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) != class {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || mask.at(r - 1, c) != class
                || mask.at(r + 1, c) != class
                || mask.at(r, c - 1) != class
                || mask.at(r, c + 1) != class;
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform of `f` (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            started = true;
            continue;
        }
        let intersect = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
        // z[0] is -inf, so this stops at k == 0 at the latest
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest of `points`.
pub fn squared_distance_map(h: usize, w: usize, points: &[(usize, usize)]) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; h * w];
    for &(r, c) in points {
        f[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = f[r * w + c];
        }
        edt_1d(&col, &mut col_out);
        for r in 0..h {
            f[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        edt_1d(&f[r * w..(r + 1) * w], &mut row_out);
        f[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    f
}

/// Symmetric Hausdorff distance between the class boundaries, scaled by
/// `spacing` when given. `None` when the class is empty in exactly one
/// mask; `Some(0.0)` when it is empty in both.
pub fn hausdorff(pred: &Mask, gt: &Mask, class: u8, spacing: Option<f64>) -> Result<Option<f64>> {
    same_shape(pred, gt)?;
    let (bp, bg) = (boundary(pred, class), boundary(gt, class));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let (h, w) = (pred.height, pred.width);
    let dg = squared_distance_map(h, w, &bg);
    let dp = squared_distance_map(h, w, &bp);
    let a = bp.iter().map(|&(r, c)| dg[r * w + c]).fold(0.0, f64::max);
    let b = bg.iter().map(|&(r, c)| dp[r * w + c]).fold(0.0, f64::max);
    Ok(Some(a.max(b).sqrt() * spacing.unwrap_or(1.0)))
}

/// Per-case metrics for foreground classes `1..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub dsc: Vec<f64>,
    pub hd: Vec<Option<f64>>,
}

pub fn evaluate_case(pred: &Mask, gt: &Mask, classes: usize, spacing: Option<f64>) -> Result<CaseMetrics> {
    let mut dsc = Vec::with_capacity(classes.saturating_sub(1));
    let mut hd = Vec::with_capacity(classes.saturating_sub(1));
    for c in 1..classes as u8 {
        dsc.push(dice(pred, gt, c)?);
        hd.push(hausdorff(pred, gt, c, spacing)?);
    }
    Ok(CaseMetrics { dsc, hd })
}

/// Per-class means over cases. Undefined Hausdorff values are excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// Mean DSC of class `k + 1`.
    pub dsc: Vec<f64>,
    /// Mean HD of class `k + 1` over cases where it is defined.
    pub hd: Vec<Option<f64>>,
    pub cases: usize,
}

impl MetricRecord {
    pub fn from_cases(cases: &[CaseMetrics]) -> Result<Self> {
        let Some(first) = cases.first() else {
            bail!(Data, "no cases to aggregate");
        };
        let k = first.dsc.len();
        let mut dsc = vec![0.0; k];
        let mut hd_sum = vec![0.0; k];
        let mut hd_n = vec![0usize; k];
        for case in cases {
            if case.dsc.len() != k {
                bail!(Shape, "cases disagree on class count");
            }
            for c in 0..k {
                dsc[c] += case.dsc[c];
                if let Some(h) = case.hd[c] {
                    hd_sum[c] += h;
                    hd_n[c] += 1;
                }
            }
        }
        let n = cases.len() as f64;
        Ok(Self {
            dsc: dsc.into_iter().map(|d| d / n).collect(),
            hd: hd_sum.iter().zip(&hd_n).map(|(&s, &m)| (m > 0).then(|| s / m as f64)).collect(),
            cases: cases.len(),
        })
    }

    /// Macro-average foreground DSC.
    pub fn mean_dsc(&self) -> f64 {
        if self.dsc.is_empty() {
            return 0.0;
        }
        self.dsc.iter().sum::<f64>() / self.dsc.len() as f64
    }

    /// Macro-average over classes with a defined HD.
    pub fn mean_hd(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hd.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Rows of the metrics CSV (`split,class,dsc,hd_mm,cases`), one per
    /// class then a `mean` row. Undefined HD is written as `nan`.
    pub fn csv_rows(&self, split: &str) -> Vec<String> {
        let fmt_hd = |h: Option<f64>| h.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let mut rows: Vec<String> = self
            .dsc
            .iter()
            .zip(&self.hd)
            .enumerate()
            .map(|(k, (d, h))| format!("{split},{},{d:.6},{},{}", k + 1, fmt_hd(*h), self.cases))
            .collect();
        rows.push(format!("{split},mean,{:.6},{},{}", self.mean_dsc(), fmt_hd(self.mean_hd()), self.cases));
        rows
    }
}

pub const METRICS_HEADER: &str = "split,class,dsc,hd_mm,cases";

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(h, w);
        for &(r, c) in on {
            m.data[r * w + c] = 1;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)]);
        let c = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &b, 2).unwrap(), 1.0);
        assert!(dice(&a, &Mask::zeros(3, 4), 1).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hausdorff(&a, &b, 1, None).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&a, &b, 1, Some(0.5)).unwrap(), Some(2.5));
        assert_eq!(hausdorff(&a, &a, 1, None).unwrap(), Some(0.0));
        assert_eq!(hausdorff(&a, &Mask::zeros(8, 8), 1, None).unwrap(), None);
        assert_eq!(hausdorff(&a, &b, 2, None).unwrap(), Some(0.0));
    }

    #[test]
    fn boundary_of_a_block_excludes_interior() {
        let on: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r + 1, c + 1))).collect();
        let b = boundary(&mask(5, 5, &on), 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn distance_map_matches_brute_force() {
        let pts = [(1, 2), (6, 6), (3, 0)];
        let d = squared_distance_map(7, 9, &pts);
        for r in 0..7 {
            for c in 0..9 {
                let want = pts
                    .iter()
                    .map(|&(pr, pc)| (r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[r * 9 + c], want);
            }
        }
    }

    #[test]
    fn record_averages_and_rows() {
        let cases = [
            CaseMetrics {
                dsc: vec![1.0, 0.5],
                hd: vec![Some(2.0), None],
            },
            CaseMetrics {
                dsc: vec![0.0, 0.5],
                hd: vec![Some(4.0), None],
            },
        ];
        let rec = MetricRecord::from_cases(&cases).unwrap();
        assert_eq!(rec.dsc, vec![0.5, 0.5]);
        assert_eq!(rec.hd, vec![Some(3.0), None]);
        assert_eq!(rec.mean_hd(), Some(3.0));
        let rows = rec.csv_rows("test");
        assert_eq!(rows[1], "test,2,0.500000,nan,2");
        assert_eq!(rows[2], "test,mean,0.500000,3.000000,2");
    }
}
