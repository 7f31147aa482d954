//! Post-processing and metrics: SoftNMS, temporal overlap, AO-Score, and
//! Mean-1/Top-1 accuracy.

mod report;
mod soft_nms;

pub use report::{per_gt_classes, ClassRow, MetricsReport, PredictionRecord};
pub use soft_nms::soft_nms;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal segment with a class and confidence; ground truth uses score 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub start: f64,
    pub end: f64,
    pub class: usize,
    pub score: f64,
}

impl ActionSegment {
    pub fn new(start: f64, end: f64, class: usize, score: f64) -> Self {
        debug_assert!(start <= end, "segment start {start} after end {end}");
        Self { start, end, class, score }
    }

    pub fn ground_truth(start: f64, end: f64, class: usize) -> Self {
        Self::new(start, end, class, 1.0)
    }
}

/// Intersection over union of two intervals. Two identical points overlap
/// fully; any other zero-length union gives the literal formula's value.
pub fn overlap_score(p: &ActionSegment, g: &ActionSegment) -> f64 {
    let inter = (g.end.min(p.end) - g.start.max(p.start)).max(0.0);
    let union = g.end.max(p.end) - g.start.min(p.start);
    if union == 0.0 {
        return 1.0;
    }
    inter / union
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AoOptions {
    /// Let one prediction match several ground truths.
    pub allow_reuse: bool,
}

fn total_order(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Ground truths are visited by `(start, end, class)`; the result does not
/// depend on input order.
fn gt_order(a: &ActionSegment, b: &ActionSegment) -> Ordering {
    total_order(a.start, b.start)
        .then(total_order(a.end, b.end))
        .then(a.class.cmp(&b.class))
}

/// Whether candidate `a` beats `b` for the same ground truth: higher overlap,
/// then higher score, then earlier start, then earlier end.
fn better_match(a: (f64, &ActionSegment), b: (f64, &ActionSegment)) -> bool {
    total_order(a.0, b.0)
        .then(total_order(a.1.score, b.1.score))
        .then(total_order(b.1.start, a.1.start))
        .then(total_order(b.1.end, a.1.end))
        == Ordering::Greater
}

/// Average overlap score.
///
/// Ground truths are matched in start-time order, each to the unconsumed
/// same-class prediction of highest overlap. Unmatched ground truths and
/// leftover predictions each contribute a zero to the mean.
pub fn ao_score(predictions: &[ActionSegment], gts: &[ActionSegment]) -> f64 {
    ao_score_with(predictions, gts, AoOptions::default())
}

pub fn ao_score_with(predictions: &[ActionSegment], gts: &[ActionSegment], opts: AoOptions) -> f64 {
    mean_or_one(&ao_overlaps(predictions, gts, opts))
}

/// Every recorded overlap (matched, unmatched ground truths, leftover
/// predictions). Pooling these across clips gives a dataset-level score.
pub fn ao_overlaps(predictions: &[ActionSegment], gts: &[ActionSegment], opts: AoOptions) -> Vec<f64> {
    let mut order: Vec<&ActionSegment> = gts.iter().collect();
    order.sort_by(|a, b| gt_order(a, b));
    let mut used = vec![false; predictions.len()];
    let mut scores = Vec::with_capacity(gts.len() + predictions.len());
    for g in order {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in predictions.iter().enumerate() {
            if p.class != g.class || (used[i] && !opts.allow_reuse) {
                continue;
            }
            let os = overlap_score(p, g);
            let wins = match best {
                None => true,
                Some((j, bos)) => better_match((os, p), (bos, &predictions[j])),
            };
            if wins {
                best = Some((i, os));
            }
        }
        match best {
            Some((i, os)) if os > 0.0 => {
                used[i] = true;
                scores.push(os);
            }
            _ => scores.push(0.0),
        }
    }
    scores.extend(used.iter().filter(|&&u| !u).map(|_| 0.0));
    scores
}

/// AO-Score over many clips: the mean of all pooled per-clip overlaps.
pub fn dataset_ao_score(clips: &[(Vec<ActionSegment>, Vec<ActionSegment>)], opts: AoOptions) -> f64 {
    let pooled: Vec<f64> = clips.iter().flat_map(|(p, g)| ao_overlaps(p, g, opts)).collect();
    mean_or_one(&pooled)
}

/// Nothing to match on either side counts as perfect agreement.
fn mean_or_one(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 1.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// `(top1, mean1)`: overall accuracy and the unweighted mean of per-class
/// recall over classes present in `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy: {} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("accuracy: empty input".into()));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    let mut correct = 0;
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= classes {
            return Err(Error::InvalidArgument(format!("accuracy: label {t} outside 0..{classes}")));
        }
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
            correct += 1;
        }
    }
    let top1 = correct as f64 / truth.len() as f64;
    let recalls: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    let mean1 = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok((top1, mean1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: f64, e: f64, c: usize) -> ActionSegment {
        ActionSegment::new(s, e, c, 0.9)
    }

    #[test]
    fn overlap_examples() {
        let g = ActionSegment::ground_truth(0.0, 10.0, 0);
        assert_eq!(overlap_score(&g, &g), 1.0);
        assert_eq!(overlap_score(&seg(20.0, 30.0, 0), &g), 0.0);
        assert!((overlap_score(&seg(5.0, 15.0, 0), &g) - 1.0 / 3.0).abs() < 1e-12);
        let point = seg(3.0, 3.0, 0);
        assert_eq!(overlap_score(&point, &point), 1.0);
        assert_eq!(overlap_score(&point, &seg(3.0, 4.0, 0)), 0.0);
    }

    #[test]
    fn ao_perfect_and_empty() {
        let gts = vec![
            ActionSegment::ground_truth(0.0, 5.0, 0),
            ActionSegment::ground_truth(8.0, 12.0, 1),
            ActionSegment::ground_truth(20.0, 30.0, 2),
        ];
        assert_eq!(ao_score(&gts, &gts), 1.0);
        assert_eq!(ao_score(&[], &gts), 0.0);
    }

    #[test]
    fn ao_counts_leftover_predictions() {
        let gts = vec![ActionSegment::ground_truth(0.0, 10.0, 0)];
        let preds = vec![seg(0.0, 10.0, 0), seg(40.0, 50.0, 0)];
        assert!((ao_score(&preds, &gts) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ao_consumes_predictions_unless_reuse_enabled() {
        let gts = vec![
            ActionSegment::ground_truth(0.0, 10.0, 0),
            ActionSegment::ground_truth(0.0, 10.0, 0),
        ];
        let preds = vec![seg(0.0, 10.0, 0)];
        assert!((ao_score(&preds, &gts) - 0.5).abs() < 1e-15);
        let reuse = ao_score_with(&preds, &gts, AoOptions { allow_reuse: true });
        assert_eq!(reuse, 1.0);
    }

    #[test]
    fn ao_pools_across_clips() {
        let g = ActionSegment::ground_truth(0.0, 10.0, 0);
        let clips = vec![(vec![g], vec![g]), (vec![], vec![g, g])];
        assert!((dataset_ao_score(&clips, AoOptions::default()) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ao_score(&[], &[]), 1.0);
    }

    #[test]
    fn ao_disjoint_spurious_prediction_lowers_score() {
        let gts = vec![ActionSegment::ground_truth(0.0, 10.0, 0)];
        let preds = vec![seg(1.0, 9.0, 0)];
        let before = ao_score(&preds, &gts);
        let after = ao_score(&[preds[0], seg(30.0, 35.0, 0)], &gts);
        assert!(after < before);
    }

    #[test]
    fn ao_ignores_other_classes() {
        let gts = vec![ActionSegment::ground_truth(0.0, 10.0, 0)];
        assert_eq!(ao_score(&[seg(0.0, 10.0, 1)], &gts), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), (1.0, 1.0));

        let truth: Vec<usize> = [vec![0; 10], vec![1; 10]].concat();
        let pred = vec![0; 20];
        let (top1, mean1) = accuracy(&pred, &truth, 2).unwrap();
        assert!((top1 - 0.5).abs() < 1e-15 && (mean1 - 0.5).abs() < 1e-15);

        let truth: Vec<usize> = [vec![0; 9], vec![1]].concat();
        let pred = vec![0; 10];
        let (top1, mean1) = accuracy(&pred, &truth, 2).unwrap();
        assert!((top1 - 0.9).abs() < 1e-15 && (mean1 - 0.5).abs() < 1e-15);

        assert!(accuracy(&[], &[], 2).is_err());
        assert!(accuracy(&[0], &[0, 1], 2).is_err());
    }
}
