//! One-to-one assignment of ground-truth segments to queries.

use crate::decoder::QueryPrediction;
use crate::error::{Error, Result};
use crate::evaluation::ActionSegment;
use crate::numerics::softmax_slice;
use crate::training::LossConfig;

/// `(query, ground truth)` pairs sorted by query; every other query is
/// background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// Ground-truth index per query, `None` for background.
    pub fn assignment(&self, queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
/// Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("hungarian: ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::InvalidArgument(format!("hungarian: {n} rows exceed {m} columns")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("hungarian: non-finite cost".into()));
    }
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // sentinel column, rows and columns are 1-based inside.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// `cost[g][q]`: `λ_cls·(1 − p_q(class_g)) + λ_reg·(|T_s − g_s| + |T_e − g_e|)/n`.
pub fn match_cost(predictions: &[QueryPrediction], gts: &[ActionSegment], frames: usize, cfg: &LossConfig) -> Vec<Vec<f64>> {
    let probs: Vec<Vec<f64>> = predictions.iter().map(|p| softmax_slice(&p.logits)).collect();
    let n = frames as f64;
    gts.iter()
        .map(|g| {
            predictions
                .iter()
                .zip(&probs)
                .map(|(p, pr)| {
                    let cls = 1.0 - pr.get(g.class).copied().unwrap_or(0.0);
                    let reg = ((p.start - g.start).abs() + (p.end - g.end).abs()) / n;
                    cfg.lambda_cls * cls + cfg.lambda_reg * reg
                })
                .collect()
        })
        .collect()
}

pub fn match_queries(
    predictions: &[QueryPrediction],
    gts: &[ActionSegment],
    frames: usize,
    cfg: &LossConfig,
) -> Result<MatchResult> {
    if gts.len() > predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth segments but only {} queries; raise decoder.num_queries",
            gts.len(),
            predictions.len()
        )));
    }
    // Ground truths enter in (start, end, class) order so that cost ties
    // resolve the same way whatever order the caller used.
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&gts[a], &gts[b]);
        x.start
            .total_cmp(&y.start)
            .then(x.end.total_cmp(&y.end))
            .then(x.class.cmp(&y.class))
            .then(a.cmp(&b))
    });
    let sorted: Vec<ActionSegment> = order.iter().map(|&i| gts[i]).collect();
    let cols = hungarian(&match_cost(predictions, &sorted, frames, cfg))?;
    let mut pairs: Vec<(usize, usize)> = cols.into_iter().enumerate().map(|(g, q)| (q, order[g])).collect();
    pairs.sort_unstable();
    Ok(MatchResult { pairs })
}
