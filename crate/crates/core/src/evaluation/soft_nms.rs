use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::evaluation::{overlap_score, ActionSegment};

/// Pick order: higher score, then earlier start, then lower class, then
/// earlier end.
fn pick_order(a: &ActionSegment, b: &ActionSegment) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.start.partial_cmp(&b.start).unwrap_or(Ordering::Equal))
        .then(a.class.cmp(&b.class))
        .then(a.end.partial_cmp(&b.end).unwrap_or(Ordering::Equal))
}

/// Gaussian SoftNMS, class-wise.
///
/// Repeatedly keeps the best remaining segment and multiplies the score of
/// every other remaining segment of its class by `exp(-iou² / sigma)`.
/// Segments whose score drops below `threshold` are discarded immediately.
/// Output is in pick order.
pub fn soft_nms(predictions: &[ActionSegment], sigma: f64, threshold: f64) -> Result<Vec<ActionSegment>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("soft_nms: sigma must be positive, got {sigma}")));
    }
    let mut pool: Vec<ActionSegment> = predictions.iter().copied().filter(|p| p.score >= threshold).collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (1..pool.len()).fold(0, |bi, i| {
            if pick_order(&pool[i], &pool[bi]) == Ordering::Less {
                i
            } else {
                bi
            }
        });
        let top = pool.swap_remove(best);
        for p in pool.iter_mut().filter(|p| p.class == top.class) {
            let iou = overlap_score(p, &top);
            p.score *= (-iou * iou / sigma).exp();
        }
        pool.retain(|p| p.score >= threshold);
        kept.push(top);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: f64, e: f64, c: usize, score: f64) -> ActionSegment {
        ActionSegment::new(s, e, c, score)
    }

    #[test]
    fn single_prediction_unchanged() {
        let p = seg(1.0, 5.0, 0, 0.7);
        assert_eq!(soft_nms(&[p], 0.5, 0.2).unwrap(), vec![p]);
    }

    #[test]
    fn identical_pair_second_dropped() {
        // 0.8 * e^-2 = 0.108 < 0.2
        let out = soft_nms(&[seg(0.0, 10.0, 1, 0.8), seg(0.0, 10.0, 1, 0.9)], 0.5, 0.2).unwrap();
        assert_eq!(out, vec![seg(0.0, 10.0, 1, 0.9)]);
        let out = soft_nms(&[seg(0.0, 10.0, 1, 0.8), seg(0.0, 10.0, 1, 0.9)], 0.5, 0.1).unwrap();
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn disjoint_segments_keep_scores() {
        let input = vec![seg(0.0, 5.0, 0, 0.5), seg(10.0, 15.0, 0, 0.6), seg(20.0, 25.0, 0, 0.3)];
        let mut out = soft_nms(&input, 0.5, 0.2).unwrap();
        out.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
        assert_eq!(out, input);
    }

    #[test]
    fn other_classes_not_suppressed() {
        let out = soft_nms(&[seg(0.0, 10.0, 0, 0.9), seg(0.0, 10.0, 1, 0.8)], 0.5, 0.2).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn ties_pick_earlier_start_then_lower_class() {
        let out = soft_nms(
            &[seg(4.0, 6.0, 1, 0.5), seg(4.0, 6.0, 0, 0.5), seg(2.0, 3.0, 2, 0.5)],
            0.5,
            0.2,
        )
        .unwrap();
        let order: Vec<(f64, usize)> = out.iter().map(|s| (s.start, s.class)).collect();
        assert_eq!(order, vec![(2.0, 2), (4.0, 0), (4.0, 1)]);
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        assert!(soft_nms(&[], 0.0, 0.2).is_err());
        assert!(soft_nms(&[], -1.0, 0.2).is_err());
        assert!(soft_nms(&[], f64::NAN, 0.2).is_err());
    }
}
