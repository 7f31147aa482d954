//! The full pipeline: both input streams, fusion, recurrent encoder, masked
//! decoder, and SoftNMS post-processing.

use rayon::prelude::*;

use crate::attention::{init_linear, linear};
use crate::config::StpConfig;
use crate::decoder::{build_mask_with, decode, predictions, DecoderOutput, QueryPrediction};
use crate::encoder::encode_sequence;
use crate::error::{Error, InModule, Result};
use crate::evaluation::{soft_nms, ActionSegment};
use crate::features::{gcn_distance_features, positional_embedding, SyntheticClip};
use crate::fusion::interact;
use crate::numerics::{softmax_slice, Graph, ParamStore, Tensor, Var};
use crate::rng::stream_rng;
use crate::training::{match_queries, total_loss, LossParts, MatchResult};

const INPUT_PROJ: &str = "input_proj";

/// Whether frames are projected to the encoder width before encoding.
pub fn needs_input_proj(cfg: &StpConfig) -> bool {
    cfg.frame_width() != cfg.encoder.dim
}

/// Fresh parameters for every module. All parameters exist regardless of the
/// ablation switches, so ablated runs share the initialization of the full
/// model.
pub fn init_params(cfg: &StpConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, "init", 0);
    let mut store = ParamStore::new();
    cfg.gcn.init_params(&mut store, cfg.data.channels, &mut rng);
    cfg.fusion().init_params(&mut store, &mut rng);
    if needs_input_proj(cfg) {
        init_linear(&mut store, INPUT_PROJ, cfg.frame_width(), cfg.encoder.dim, &mut rng);
    }
    cfg.encoder.init_params(&mut store, &mut rng);
    cfg.decoder.init_params(&mut store, &mut rng);
    Ok(store)
}

/// Learnable scalar count for a config.
pub fn param_count(cfg: &StpConfig) -> Result<usize> {
    Ok(init_params(cfg, 0)?.num_scalars())
}

fn check_clip(clip: &SyntheticClip, cfg: &StpConfig) -> Result<()> {
    let f = &clip.temporal_features;
    let t = clip.frames();
    if t < cfg.data.stride.max(1) {
        return Err(Error::Input(format!(
            "clip {} has {t} frames, below one stride ({})",
            clip.video_id, cfg.data.stride
        )));
    }
    if f.frames() != t || f.channels() != cfg.data.channels || f.width() != cfg.data.width {
        return Err(Error::Input(format!(
            "clip {} features are {:?}, config expects [{t}, {}, {}]",
            clip.video_id,
            f.tensor().shape(),
            cfg.data.channels,
            cfg.data.width
        )));
    }
    if cfg.decoder.num_queries > t {
        return Err(Error::Input(format!(
            "clip {} has {t} frames, fewer than {} queries",
            clip.video_id, cfg.decoder.num_queries
        )));
    }
    Ok(())
}

/// Each row index repeated `width` times: frame rows to token rows.
fn token_rows(frames: usize, width: usize) -> Vec<usize> {
    (0..frames).flat_map(|t| std::iter::repeat_n(t, width)).collect()
}

/// Encoder input `T × D` from both streams.
fn frame_embeddings(g: &mut Graph, clip: &SyntheticClip, store: &ParamStore, cfg: &StpConfig) -> Result<Var> {
    let (t, c, l) = (clip.frames(), cfg.data.channels, cfg.data.width);
    let rows = token_rows(t, l);
    let temporal = {
        let pe = positional_embedding(t, c).in_module("features")?;
        let pe = g.constant(pe);
        let pe = g.gather_rows(pe, &rows).in_module("features")?;
        if cfg.ablation.temporal_stream {
            let x = g.constant(clip.temporal_features.to_rows());
            g.add(x, pe).in_module("features")?
        } else {
            pe
        }
    };
    let distance = if cfg.ablation.distance_stream {
        let d = gcn_distance_features(g, &clip.keypoints, &cfg.gcn, store).in_module("features")?;
        g.gather_rows(d, &rows).in_module("features")?
    } else {
        g.constant(Tensor::zeros(&[t * l, c]))
    };
    let (xp, xd) = interact(g, temporal, distance, &cfg.fusion(), store).in_module("fusion")?;
    let fused = g.add(xp, xd).in_module("fusion")?;
    let flat = g.reshape(fused, &[t, l * c]).in_module("fusion")?;
    if needs_input_proj(cfg) {
        linear(g, store, INPUT_PROJ, flat).in_module("encoder")
    } else {
        Ok(flat)
    }
}

/// Full forward pass; the decoder output holds `N_q` candidates.
pub fn forward(g: &mut Graph, clip: &SyntheticClip, store: &ParamStore, cfg: &StpConfig) -> Result<DecoderOutput> {
    check_clip(clip, cfg)?;
    let frames = frame_embeddings(g, clip, store, cfg)?;
    let memory = encode_sequence(g, frames, &cfg.encoder, store).in_module("encoder")?;
    let mask = build_mask_with(cfg.mask_rule(), clip.frames(), cfg.decoder.num_queries).in_module("decoder")?;
    decode(g, memory, &mask, &cfg.decoder, store).in_module("decoder")
}

/// Candidates in frame units, straight from the heads.
pub fn candidates(clip: &SyntheticClip, store: &ParamStore, cfg: &StpConfig) -> Result<Vec<QueryPrediction>> {
    let mut g = Graph::new();
    let out = forward(&mut g, clip, store, cfg)?;
    Ok(predictions(&g, &out, clip.frames()))
}

/// Loss graph of one clip.
pub struct ClipLoss {
    pub parts: LossParts,
    pub matching: MatchResult,
}

pub fn clip_loss(g: &mut Graph, clip: &SyntheticClip, store: &ParamStore, cfg: &StpConfig) -> Result<ClipLoss> {
    let out = forward(g, clip, store, cfg)?;
    let frames = clip.frames();
    let preds = predictions(g, &out, frames);
    let matching = match_queries(&preds, &clip.ground_truth, frames, &cfg.loss).in_module("training")?;
    let parts =
        total_loss(g, out.spans, out.logits, &clip.ground_truth, &matching, frames, &cfg.loss).in_module("training")?;
    Ok(ClipLoss { parts, matching })
}

/// Drop candidates whose most likely class is background and score the rest
/// by their best foreground probability.
pub fn foreground_segments(preds: &[QueryPrediction]) -> Vec<ActionSegment> {
    preds
        .iter()
        .filter_map(|p| {
            let probs = softmax_slice(&p.logits);
            let background = probs.len() - 1;
            let (best, &score) = probs[..background]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            (score >= probs[background]).then(|| ActionSegment::new(p.start, p.end, best, score))
        })
        .collect()
}

/// Final segments of one clip after SoftNMS.
pub fn infer(clip: &SyntheticClip, store: &ParamStore, cfg: &StpConfig) -> Result<Vec<ActionSegment>> {
    let preds = candidates(clip, store, cfg)?;
    soft_nms(&foreground_segments(&preds), cfg.eval.sigma, cfg.eval.threshold).in_module("evaluation")
}

/// [`infer`] over many clips in parallel; output order follows `clips`.
pub fn infer_batch(clips: &[SyntheticClip], store: &ParamStore, cfg: &StpConfig) -> Result<Vec<Vec<ActionSegment>>> {
    clips.par_iter().map(|c| infer(c, store, cfg)).collect()
}
