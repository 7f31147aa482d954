//! Focal classification loss, smooth-L1 span regression, and their weighted
//! sum over matched queries.

use crate::error::{Error, Result};
use crate::evaluation::ActionSegment;
use crate::numerics::{smooth_l1_value, softmax_slice, Graph, Tensor, Var};
use crate::training::{LossConfig, MatchResult};

pub const LOG_FLOOR: f64 = 1e-12;

/// Focal loss of one logit row against `target`; `background` is the index
/// weighted by `1 − α` instead of `α`.
pub fn focal_loss(logits: &[f64], target: usize, background: usize, gamma: f64, alpha: f64) -> f64 {
    let p = softmax_slice(logits)[target];
    let a = if target == background { 1.0 - alpha } else { alpha };
    -a * (1.0 - p).powf(gamma) * p.max(LOG_FLOOR).ln()
}

/// `Σ smooth_l1(pred − gt)` over both endpoints.
pub fn smooth_l1(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    smooth_l1_value(pred.0 - gt.0) + smooth_l1_value(pred.1 - gt.1)
}

/// Mean focal loss over the rows of `logits` (`N × (K+1)`).
pub fn focal_loss_rows(g: &mut Graph, logits: Var, targets: &[usize], cfg: &LossConfig) -> Result<Var> {
    let (rows, width) = g.value(logits).dims2("focal_loss")?;
    if targets.len() != rows {
        return Err(Error::shape("focal_loss", format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
        return Err(Error::InvalidArgument(format!("focal_loss: target {bad} outside 0..{width}")));
    }
    let background = width - 1;
    let probs = g.softmax_rows(logits)?;
    let flat: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * width + t).collect();
    let pt = g.gather(probs, &flat)?;
    let miss = g.affine(pt, -1.0, 1.0)?;
    let modulating = g.pow(miss, cfg.gamma)?;
    let log_pt = g.ln_clamped(pt, LOG_FLOOR)?;
    let per_row = g.mul(modulating, log_pt)?;
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t == background { 1.0 - cfg.alpha } else { cfg.alpha })
        .collect();
    let w = g.constant(Tensor::vector(&weights));
    let weighted = g.mul(per_row, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / rows as f64)
}

/// Loss terms of one clip.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `λ_cls · mean focal over all queries + λ_reg · mean smooth-L1 over matched
/// queries`. `spans` is `N_q × 2` normalized `(T_s, T_e)`.
pub fn total_loss(
    g: &mut Graph,
    spans: Var,
    logits: Var,
    gts: &[ActionSegment],
    matching: &MatchResult,
    frames: usize,
    cfg: &LossConfig,
) -> Result<LossParts> {
    let (queries, width) = g.value(logits).dims2("total_loss")?;
    let background = width - 1;
    let mut targets = vec![background; queries];
    for &(q, gi) in &matching.pairs {
        targets[q] = gts[gi].class;
    }
    let cls = focal_loss_rows(g, logits, &targets, cfg)?;
    let reg = if matching.pairs.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let rows: Vec<usize> = matching.pairs.iter().map(|&(q, _)| q).collect();
        let picked = g.gather_rows(spans, &rows)?;
        let n = frames as f64;
        let target: Vec<f64> = matching
            .pairs
            .iter()
            .flat_map(|&(_, gi)| [gts[gi].start / n, gts[gi].end / n])
            .collect();
        let target = g.constant(Tensor::new(vec![rows.len(), 2], target)?);
        let diff = g.sub(picked, target)?;
        let per = g.smooth_l1(diff)?;
        let s = g.sum(per)?;
        g.scale(s, 1.0 / rows.len() as f64)?
    };
    let a = g.scale(cls, cfg.lambda_cls)?;
    let b = g.scale(reg, cfg.lambda_reg)?;
    let total = g.add(a, b)?;
    Ok(LossParts { total, cls, reg })
}
