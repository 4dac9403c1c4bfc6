//! Threshold-free detection metrics and the three downstream detection tasks.
//!
//! Scores follow the "higher means more likely positive" convention, so the
//! tasks score inputs by negative uncertainty.

use serde::{Deserialize, Serialize};

use crate::data::{corrupt, LabeledDataset};
use crate::error::{domain, Error, Result};
use crate::nnet::ModelState;
use crate::numerics::Matrix;
use crate::trainer::predict_batch;
use crate::uncertainty::UncertaintyReport;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return domain("scores contain NaN");
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return domain("both positive and negative labels are required");
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, split into groups of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut wins = 0.0;
    // walk from the lowest score up, counting negatives already passed
    let mut neg_below = 0usize;
    for group in tie_groups(scores).iter().rev() {
        let p = group.iter().filter(|i| labels[**i]).count();
        let n = group.len() - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision: `Σ ΔTP · precision / P` over descending
/// score thresholds, with tied scores entering together.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for group in tie_groups(scores) {
        let p = group.iter().filter(|i| labels[**i]).count();
        tp += p;
        fp += group.len() - p;
        if p > 0 {
            area += p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(area / pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub auroc: f64,
    pub aupr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// How scores and labels were formed, e.g. `"-AU; correct=1"`.
    pub score_convention: String,
}

pub fn detect(scores: &[f64], labels: &[bool], convention: &str) -> Result<DetectionResult> {
    let (n_pos, n_neg) = check(scores, labels)?;
    Ok(DetectionResult {
        auroc: auroc(scores, labels)?,
        aupr: aupr(scores, labels)?,
        n_pos,
        n_neg,
        score_convention: convention.to_string(),
    })
}

pub const MISCLASSIFICATION_CONVENTION: &str = "-AU; correct=1";
pub const OOD_CONVENTION: &str = "-EU; ID=1";
pub const SHIFT_CONVENTION: &str = "-EU; clean=1";

/// Misclassification detection from precomputed reports.
pub fn misclassification_from_reports(reports: &[UncertaintyReport], labels: &[usize]) -> Result<DetectionResult> {
    let scores: Vec<f64> = reports.iter().map(|r| -r.au).collect();
    let correct: Vec<bool> = reports
        .iter()
        .zip(labels)
        .map(|(r, y)| r.predicted_class == *y)
        .collect();
    if correct.iter().all(|c| *c) {
        return domain("every prediction is correct; misclassification metrics are undefined");
    }
    detect(&scores, &correct, MISCLASSIFICATION_CONVENTION)
}

/// Positives first, negatives second, both scored by negative EU.
pub fn eu_detection(positive: &[UncertaintyReport], negative: &[UncertaintyReport], convention: &str) -> Result<DetectionResult> {
    let scores: Vec<f64> = positive.iter().chain(negative).map(|r| -r.eu).collect();
    let labels: Vec<bool> = (0..scores.len()).map(|i| i < positive.len()).collect();
    detect(&scores, &labels, convention)
}

pub fn misclassification_task(m: &ModelState, test: &LabeledDataset) -> Result<DetectionResult> {
    let reports = predict_batch(m, &test.rows())?;
    misclassification_from_reports(&reports, &test.labels)
}

pub fn ood_task(m: &ModelState, id_test: &LabeledDataset, ood: &Matrix) -> Result<DetectionResult> {
    if id_test.is_empty() || ood.rows() == 0 {
        return domain("ID and OOD sets must be nonempty");
    }
    let id = predict_batch(m, &id_test.rows())?;
    let ood_rows: Vec<&[f64]> = (0..ood.rows()).map(|i| ood.row(i)).collect();
    let out = predict_batch(m, &ood_rows)?;
    eu_detection(&id, &out, OOD_CONVENTION)
}

/// One result per severity. The corruption noise for severity `s` comes
/// from `seed` alone, so severities share nothing but the clean set.
pub fn shift_task(m: &ModelState, clean: &LabeledDataset, severities: &[u8], seed: u64) -> Result<Vec<(u8, DetectionResult)>> {
    let base = predict_batch(m, &clean.rows())?;
    severities
        .iter()
        .map(|s| {
            let shifted = corrupt(clean, *s, seed)?;
            let reports = predict_batch(m, &shifted.rows())?;
            Ok((*s, eu_detection(&base, &reports, SHIFT_CONVENTION)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex_dist::SimplexVec;

    fn rep(class: usize, au: f64, eu: f64) -> UncertaintyReport {
        UncertaintyReport {
            predicted_class: class,
            mean: SimplexVec::one_hot(2, class).unwrap(),
            au,
            eu,
            eu_inter: 0.0,
            eu_intra: eu,
        }
    }

    #[test]
    fn four_point_example() {
        let s = [0.9, 0.8, 0.7, 0.6];
        let l = [true, false, true, false];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
        // thresholds: 0.9 -> P=1; 0.7 -> P=2/3
        assert!((aupr(&s, &l).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn extremes() {
        let l = [true, true, false, false, false];
        assert_eq!(auroc(&[5.0, 4.0, 3.0, 2.0, 1.0], &l).unwrap(), 1.0);
        assert_eq!(aupr(&[5.0, 4.0, 3.0, 2.0, 1.0], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 5], &l).unwrap(), 0.5);
        assert!((aupr(&[1.0; 5], &l).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(aupr(&[1.0], &[true, false]).is_err());
        assert!(auroc(&[f64::NAN, 1.0], &[true, false]).is_err());
    }

    #[test]
    fn constructed_reports() {
        let ok: Vec<_> = (0..5).map(|_| rep(0, 0.0, 0.01)).collect();
        let bad: Vec<_> = (0..3).map(|_| rep(1, 2f64.ln(), 0.5)).collect();
        let all: Vec<_> = ok.iter().chain(&bad).cloned().collect();
        let r = misclassification_from_reports(&all, &[0; 8]).unwrap();
        assert_eq!((r.aupr, r.n_pos, r.n_neg), (1.0, 5, 3));
        let r = eu_detection(&ok, &bad, OOD_CONVENTION).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert!(misclassification_from_reports(&ok, &[0; 5]).is_err());
    }
}
