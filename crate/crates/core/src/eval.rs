//! ROC curves, AUC, the DeLong test for paired AUCs and constrained
//! operating points.
//!
//! Positives are the anomalous class and higher scores are more anomalous.
//! An image is called positive when its score is at least the threshold.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use statrs::function::erf::erfc;

use crate::anogan::ScoreRecord;
use crate::error::{Error, Result};

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Contract(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(format!("both classes required, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// Count of (positive, negative) pairs the score orders correctly, with a tie
/// counting one half, doubled so it stays an integer.
fn twice_wins(scores: &[f64], labels: &[bool]) -> u64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut total, mut neg_below, mut i) = (0u64, 0u64, 0);
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (p, n) = order[i..j].iter().fold((0u64, 0u64), |(p, n), &k| if labels[k] { (p + 1, n) } else { (p, n + 1) });
        total += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    total
}

/// Mann-Whitney AUC: `P(score_pos > score_neg) + P(tie) / 2`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    Ok(twice_wins(scores, labels) as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub true_pos: usize,
    pub false_pos: usize,
}

/// Points for ascending unique score thresholds, plus a final `+inf`
/// threshold that calls nothing positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut tp, mut fp) = (pos, neg);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        points.push(RocPoint {
            threshold: t,
            sensitivity: tp as f64 / pos as f64,
            specificity: 1.0 - fp as f64 / neg as f64,
            true_pos: tp,
            false_pos: fp,
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint { threshold: f64::INFINITY, sensitivity: 0.0, specificity: 1.0, true_pos: 0, false_pos: 0 });
    Ok(RocCurve { points, positives: pos, negatives: neg })
}

impl RocCurve {
    /// Trapezoidal area under sensitivity against `1 - specificity`.
    pub fn area(&self) -> f64 {
        let twice: u64 = self
            .points
            .windows(2)
            .map(|w| ((w[0].false_pos - w[1].false_pos) * (w[0].true_pos + w[1].true_pos)) as u64)
            .sum();
        twice as f64 / (2 * self.positives * self.negatives) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeLongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub variance: f64,
    /// `None` when the variance of the difference is degenerate.
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub diagnostic: Option<String>,
    /// Scores were treated as independent rather than paired.
    pub unpaired: bool,
}

/// Per-case placement values: for each positive, the fraction of negatives
/// it outranks (ties ½), and for each negative the fraction of positives
/// that outrank it.
fn placements(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let psi = |x: f64, y: f64| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
    let v10 = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64).collect();
    let v01 = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64).collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

fn finish(auc_a: f64, auc_b: f64, variance: f64, identical: bool, unpaired: bool) -> DeLongResult {
    let base = DeLongResult { auc_a, auc_b, variance, z: None, p_value: None, diagnostic: None, unpaired };
    if identical {
        return DeLongResult { z: Some(0.0), p_value: Some(1.0), ..base };
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return DeLongResult {
            diagnostic: Some(format!(
                "degenerate variance {variance:e} with AUCs {auc_a} and {auc_b}: placement values carry no spread"
            )),
            ..base
        };
    }
    let z = (auc_a - auc_b) / variance.sqrt();
    DeLongResult { z: Some(z), p_value: Some(two_sided_p(z)), ..base }
}

/// Paired DeLong test of `AUC(a) - AUC(b)` over the same cases.
///
/// When every per-case placement of `a` equals that of `b` the difference is
/// identically zero and the result is `z = 0, p = 1`; any other zero-variance
/// case has no p-value and carries a diagnostic.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DeLongResult> {
    let (pos, neg) = class_counts(scores_a, labels)?;
    class_counts(scores_b, labels)?;
    if pos < 2 || neg < 2 {
        return Err(Error::Contract("DeLong needs at least two cases per class".into()));
    }
    let (a10, a01) = placements(scores_a, labels);
    let (b10, b01) = placements(scores_b, labels);
    let auc_a = auc(scores_a, labels)?;
    let auc_b = auc(scores_b, labels)?;
    let d10: Vec<f64> = a10.iter().zip(&b10).map(|(x, y)| x - y).collect();
    let d01: Vec<f64> = a01.iter().zip(&b01).map(|(x, y)| x - y).collect();
    let identical = d10.iter().chain(&d01).all(|&d| d == 0.0);
    let variance = covariance(&d10, &d10) / pos as f64 + covariance(&d01, &d01) / neg as f64;
    Ok(finish(auc_a, auc_b, variance, identical, false))
}

/// Experimental: DeLong variances of two AUCs from independent case sets,
/// summed as if uncorrelated.
pub fn delong_test_unpaired(
    scores_a: &[f64],
    labels_a: &[bool],
    scores_b: &[f64],
    labels_b: &[bool],
) -> Result<DeLongResult> {
    let var_of = |s: &[f64], l: &[bool]| -> Result<(f64, f64)> {
        let (pos, neg) = class_counts(s, l)?;
        if pos < 2 || neg < 2 {
            return Err(Error::Contract("DeLong needs at least two cases per class".into()));
        }
        let (v10, v01) = placements(s, l);
        Ok((auc(s, l)?, covariance(&v10, &v10) / pos as f64 + covariance(&v01, &v01) / neg as f64))
    };
    let (auc_a, va) = var_of(scores_a, labels_a)?;
    let (auc_b, vb) = var_of(scores_b, labels_b)?;
    Ok(finish(auc_a, auc_b, va + vb, false, true))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// Whether both minimums were met.
    pub feasible: bool,
}

/// Best ROC point by `sensitivity + specificity` among those meeting both
/// minimums; ties go to higher accuracy, then lower threshold. Without a
/// feasible point, the best point overall is returned with `feasible = false`.
pub fn operating_point(scores: &[f64], labels: &[bool], min_sens: f64, min_spec: f64) -> Result<OperatingPoint> {
    let roc = roc_curve(scores, labels)?;
    let total = (roc.positives + roc.negatives) as f64;
    let candidates: Vec<OperatingPoint> = roc
        .points
        .iter()
        .map(|p| {
            let tn = roc.negatives - p.false_pos;
            OperatingPoint {
                threshold: p.threshold,
                sensitivity: p.sensitivity,
                specificity: p.specificity,
                accuracy: (p.true_pos + tn) as f64 / total,
                feasible: p.sensitivity >= min_sens && p.specificity >= min_spec,
            }
        })
        .collect();
    let better = |a: &OperatingPoint, b: &OperatingPoint| {
        let (sa, sb) = (a.sensitivity + a.specificity, b.sensitivity + b.specificity);
        sa > sb || (sa == sb && (a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.threshold < b.threshold)))
    };
    let pick = |feasible_only: bool| {
        candidates
            .iter()
            .filter(|c| !feasible_only || c.feasible)
            .fold(None::<&OperatingPoint>, |best, c| match best {
                Some(b) if !better(c, b) => Some(b),
                _ => Some(c),
            })
            .cloned()
    };
    Ok(pick(true).or_else(|| pick(false)).expect("ROC has points"))
}

pub const MIN_SENS: f64 = 0.80;
pub const MIN_SPEC: f64 = 0.80;

pub const METRICS_HEADER: &str = "experiment,auc,p_vs_baseline,sens,spec,acc,threshold";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub auc: f64,
    /// Empty for the baseline itself.
    pub p_vs_baseline: Option<DeLongResult>,
    pub point: OperatingPoint,
}

fn fmt_p(p: &Option<DeLongResult>) -> String {
    match p {
        None => String::new(),
        Some(r) => match r.p_value {
            Some(v) => format!("{v:e}"),
            None => "undefined".into(),
        },
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{:.6},{:.6},{:.6},{}\n",
            r.experiment,
            r.auc,
            fmt_p(&r.p_vs_baseline),
            r.point.sensitivity,
            r.point.specificity,
            r.point.accuracy,
            r.point.threshold,
        ));
    }
    for r in rows.iter().filter(|r| !r.point.feasible) {
        out.push_str(&format!("# {}: no threshold meets sens >= {MIN_SENS} and spec >= {MIN_SPEC}\n", r.experiment));
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, metrics_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Scores and labels of the records whose label is `positive` or in
/// `negatives`, in record order.
pub fn labelled_scores(records: &[ScoreRecord], positive: &str, negatives: &[&str]) -> (Vec<String>, Vec<f64>, Vec<bool>) {
    let keep = records.iter().filter(|r| r.true_label == positive || negatives.contains(&r.true_label.as_str()));
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in keep {
        ids.push(r.image_id.clone());
        scores.push(r.score);
        labels.push(r.true_label == positive);
    }
    (ids, scores, labels)
}

/// One metrics row per experiment; every non-baseline row carries a paired
/// DeLong test against `experiments[baseline]` over the same image ids.
pub fn compare_experiments(
    experiments: &[(String, Vec<ScoreRecord>)],
    baseline: usize,
    positive: &str,
    negatives: &[&str],
) -> Result<Vec<MetricsRow>> {
    let base = experiments
        .get(baseline)
        .ok_or_else(|| Error::Config(format!("baseline index {baseline} out of range")))?;
    let (base_ids, base_scores, base_labels) = labelled_scores(&base.1, positive, negatives);
    let mut rows = Vec::new();
    for (k, (name, records)) in experiments.iter().enumerate() {
        let by_id: BTreeMap<&str, &ScoreRecord> = records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        let (_, scores, labels) = labelled_scores(records, positive, negatives);
        let point = operating_point(&scores, &labels, MIN_SENS, MIN_SPEC)?;
        let p_vs_baseline = if k == baseline {
            None
        } else {
            let mut paired = Vec::with_capacity(base_ids.len());
            for id in &base_ids {
                let r = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Integrity(format!("experiment {name:?} lacks image {id:?} scored by the baseline")))?;
                paired.push(r.score);
            }
            if scores.len() != base_scores.len() {
                return Err(Error::Integrity(format!("experiment {name:?} scores a different image set")));
            }
            Some(delong_test(&paired, &base_scores, &base_labels)?)
        };
        rows.push(MetricsRow { experiment: name.clone(), auc: auc(&scores, &labels)?, p_vs_baseline, point });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut w, mut n) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    n += 1.0;
                    w += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        w / n
    }

    #[test]
    fn small_cases() {
        let l = [false, false, true, true];
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.0, 0.1, 0.5, 0.9], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.2; 4], &l).unwrap(), 0.5);
        assert_eq!(roc_curve(&[0.2; 4], &l).unwrap().area(), 0.5);
        assert_eq!(roc_curve(&[0.0, 1.0], &[false, true]).unwrap().area(), 1.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Contract(_))));
    }

    #[test]
    fn inverted_labels_complement() {
        let s = [0.3, 0.1, 0.3, 0.9, 0.5, 0.5, 0.2];
        let l = [true, false, false, true, false, true, true];
        let inv: Vec<bool> = l.iter().map(|b| !b).collect();
        assert!((auc(&s, &l).unwrap() + auc(&s, &inv).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(auc(&s, &l).unwrap(), pairwise(&s, &l));
    }

    #[test]
    fn roc_endpoints_and_monotone() {
        let s = [0.3, 0.1, 0.3, 0.9, 0.5, 0.5, 0.2];
        let l = [true, false, false, true, false, true, true];
        let roc = roc_curve(&s, &l).unwrap();
        let first = &roc.points[0];
        let last = roc.points.last().unwrap();
        assert_eq!((first.sensitivity, first.specificity), (1.0, 0.0));
        assert_eq!((last.sensitivity, last.specificity), (0.0, 1.0));
        assert!(roc.points.windows(2).all(|w| w[1].sensitivity <= w[0].sensitivity));
    }

    #[test]
    fn delong_identical_and_antisymmetric() {
        let s = [0.3, 0.1, 0.3, 0.9, 0.5, 0.5, 0.2, 0.05];
        let t = [0.2, 0.4, 0.1, 0.8, 0.3, 0.7, 0.6, 0.0];
        let l = [true, false, false, true, false, true, true, false];
        let same = delong_test(&s, &s, &l).unwrap();
        assert_eq!((same.z, same.p_value), (Some(0.0), Some(1.0)));
        let ab = delong_test(&s, &t, &l).unwrap();
        let ba = delong_test(&t, &s, &l).unwrap();
        assert_eq!(ab.z.unwrap(), -ba.z.unwrap());
        assert_eq!(ab.p_value, ba.p_value);
        assert!(ab.z.unwrap().signum() == (ab.auc_a - ab.auc_b).signum());
    }

    #[test]
    fn delong_degenerate_reports_undefined() {
        // both perfect with different orderings inside each class
        let a = [0.9, 0.8, 0.1, 0.2];
        let b = [0.8, 0.9, 0.2, 0.1];
        let l = [true, true, false, false];
        let r = delong_test(&a, &b, &l).unwrap();
        assert_eq!(r.p_value, Some(1.0));
        let c = [0.9, 0.8, 0.85, 0.1];
        let r = delong_test(&a, &c, &l).unwrap();
        assert!(r.variance > 0.0);
        let perfect = [0.9, 0.95, 0.1, 0.0];
        let flat = [0.5, 0.5, 0.5, 0.5];
        let r = delong_test(&perfect, &flat, &l).unwrap();
        assert!(r.p_value.is_none() && r.diagnostic.is_some());
    }

    #[test]
    fn operating_point_rules() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        let p = operating_point(&s, &l, MIN_SENS, MIN_SPEC).unwrap();
        assert_eq!((p.sensitivity, p.specificity, p.accuracy, p.feasible), (1.0, 1.0, 1.0, true));
        assert_eq!(p.threshold, 0.8);
        let bad = operating_point(&[0.5, 0.4, 0.6, 0.3], &l, MIN_SENS, MIN_SPEC).unwrap();
        assert!(!bad.feasible);
    }
}
