//! Query decoder: learnable queries read the encoded frames through a
//! staircase mask, then regression and classification heads turn each
//! query into one candidate segment.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::attention::{
    ffn, init_attention, init_ffn, init_layer_norm, init_linear, layer_norm, linear, multi_head_attention,
    AttentionOutput,
};
use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, Tensor, Var};

/// Which frames each query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRule {
    /// Query `i` (1-based) sees the first `ceil(i·n/N_q)` frames.
    Staircase,
    /// Query `i` (0-based) sees frame `j` iff `i ≥ j·⌊n/N_q⌋`.
    FloorStep,
    /// Every query sees every frame.
    Full,
}

impl FromStr for MaskRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staircase" => Ok(Self::Staircase),
            "floor_step" => Ok(Self::FloorStep),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask rule '{other}' (expected staircase, floor_step or full)"
            ))),
        }
    }
}

impl fmt::Display for MaskRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Staircase => "staircase",
            Self::FloorStep => "floor_step",
            Self::Full => "full",
        })
    }
}

/// A 0/1 query-by-frame mask stored as one prefix length per query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    frames: usize,
    prefixes: Arc<[usize]>,
}

impl CausalMask {
    /// Rows must be non-empty, non-decreasing prefixes of `frames`.
    pub fn new(frames: usize, prefixes: Vec<usize>) -> Result<Self> {
        if frames == 0 || prefixes.is_empty() {
            return Err(Error::InvalidArgument("causal mask: zero frames or queries".into()));
        }
        if let Some(i) = prefixes.iter().position(|&p| p == 0 || p > frames) {
            return Err(Error::InvalidArgument(format!(
                "causal mask: row {i} prefix {} outside 1..={frames}",
                prefixes[i]
            )));
        }
        if let Some(i) = prefixes.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(format!("causal mask: row {} shrinks", i + 1)));
        }
        Ok(Self { frames, prefixes: prefixes.into() })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn queries(&self) -> usize {
        self.prefixes.len()
    }

    pub fn prefixes(&self) -> &[usize] {
        &self.prefixes
    }

    pub fn prefix_arc(&self) -> Arc<[usize]> {
        self.prefixes.clone()
    }

    pub fn get(&self, query: usize, frame: usize) -> bool {
        frame < self.prefixes[query]
    }

    pub fn last_row_full(&self) -> bool {
        self.prefixes.last() == Some(&self.frames)
    }

    /// Dense `N_q × n` 0/1 matrix.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.queries() * self.frames];
        for (i, &p) in self.prefixes.iter().enumerate() {
            data[i * self.frames..i * self.frames + p].fill(1.0);
        }
        Tensor::new(vec![self.queries(), self.frames], data).expect("consistent shape")
    }
}

/// The staircase mask.
pub fn build_mask(frames: usize, queries: usize) -> Result<CausalMask> {
    build_mask_with(MaskRule::Staircase, frames, queries)
}

pub fn build_mask_with(rule: MaskRule, frames: usize, queries: usize) -> Result<CausalMask> {
    if frames == 0 || queries == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask needs at least one frame and one query, got n={frames}, N_q={queries}"
        )));
    }
    let prefixes = match rule {
        MaskRule::Staircase => (1..=queries).map(|i| (i * frames).div_ceil(queries)).collect(),
        MaskRule::FloorStep => {
            let step = frames / queries;
            (0..queries)
                .map(|i| if step == 0 { frames } else { (i / step + 1).min(frames) })
                .collect()
        }
        MaskRule::Full => vec![frames; queries],
    };
    CausalMask::new(frames, prefixes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub classes: usize,
    pub mask_rule: MaskRule,
    /// Scale cross-attention logits by `1/√D`.
    pub scale_logits: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_queries: 16,
            blocks: 2,
            heads: 4,
            dim: 256,
            ffn_dim: 1024,
            classes: 3,
            mask_rule: MaskRule::Staircase,
            scale_logits: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.blocks == 0 || self.heads == 0 || self.dim == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument(format!("decoder: sizes must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder: dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn cross_scale(&self) -> f64 {
        if self.scale_logits {
            1.0 / (self.dim as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert("decoder.queries", init::normal(rng, &[self.num_queries, self.dim], 1.0));
        for b in 0..self.blocks {
            let p = format!("decoder.block{b}");
            init_layer_norm(store, &format!("{p}.ln_self"), self.dim);
            init_attention(store, &format!("{p}.self_attn"), self.dim, rng);
            init_layer_norm(store, &format!("{p}.ln_cross"), self.dim);
            init_attention(store, &format!("{p}.cross_attn"), self.dim, rng);
            init_layer_norm(store, &format!("{p}.ln_ffn"), self.dim);
            init_ffn(store, &format!("{p}.ffn"), self.dim, self.ffn_dim, rng);
        }
        init_layer_norm(store, "decoder.final_ln", self.dim);
        init_linear(store, "decoder.reg.fc1", self.dim, self.dim, rng);
        init_linear(store, "decoder.reg.fc2", self.dim, 2, rng);
        init_linear(store, "decoder.cls", self.dim, self.classes + 1, rng);
    }
}

/// Masked cross-attention: query `i` reads only frames inside its prefix.
/// Masked frames are never touched, so they cannot affect that query.
#[allow(clippy::too_many_arguments)]
pub fn causal_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    path: &str,
    queries: Var,
    frames: Var,
    mask: &CausalMask,
    heads: usize,
    scale: f64,
) -> Result<AttentionOutput> {
    let (m, _) = g.value(queries).dims2("cross_attention")?;
    let (n, _) = g.value(frames).dims2("cross_attention")?;
    if mask.queries() != m || mask.frames() != n {
        return Err(Error::shape(
            "cross_attention",
            format!("mask is {}×{}, attention is {m}×{n}", mask.queries(), mask.frames()),
        ));
    }
    multi_head_attention(g, store, path, queries, frames, heads, scale, Some(mask.prefix_arc()))
}

/// Reference single-head attention that scores every frame and then hides
/// masked frames with a large negative bias. Same result as the prefix
/// kernel, at the cost of the full `N_q × n` score matrix.
pub fn dense_masked_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &CausalMask, scale: f64) -> Result<Var> {
    let bias: Vec<f64> = (0..mask.queries())
        .flat_map(|i| (0..mask.frames()).map(move |j| if mask.get(i, j) { 0.0 } else { -1e30 }))
        .collect();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, scale)?;
    let bias = g.constant(Tensor::new(vec![mask.queries(), mask.frames()], bias)?);
    let scores = g.add(scores, bias)?;
    let w = g.softmax_rows(scores)?;
    g.matmul(w, v)
}

/// Decoder output for one clip.
pub struct DecoderOutput {
    /// `N_q × 2` normalized `(T_s, T_e)`.
    pub spans: Var,
    /// `N_q × (K+1)` class logits, background last.
    pub logits: Var,
    /// Cross-attention nodes of the last block.
    pub cross_attention: Vec<Var>,
}

/// Queries through every block against `memory` (`n × D`).
pub fn decode(
    g: &mut Graph,
    memory: Var,
    mask: &CausalMask,
    cfg: &DecoderConfig,
    store: &ParamStore,
) -> Result<DecoderOutput> {
    cfg.validate()?;
    let (_, d) = g.value(memory).dims2("decoder")?;
    if d != cfg.dim {
        return Err(Error::shape("decoder", format!("memory width {d}, expected D={}", cfg.dim)));
    }
    let mut h = g.param(store, "decoder.queries")?;
    if g.shape(h) != [cfg.num_queries, cfg.dim] {
        return Err(Error::shape(
            "decoder",
            format!("queries {:?}, expected [{}, {}]", g.shape(h), cfg.num_queries, cfg.dim),
        ));
    }
    let self_scale = 1.0 / (cfg.dim as f64).sqrt();
    let mut cross_attention = Vec::new();
    for b in 0..cfg.blocks {
        let p = format!("decoder.block{b}");
        let x = layer_norm(g, store, &format!("{p}.ln_self"), h)?;
        let sa = multi_head_attention(g, store, &format!("{p}.self_attn"), x, x, cfg.heads, self_scale, None)?;
        h = g.add(h, sa.out)?;
        let x = layer_norm(g, store, &format!("{p}.ln_cross"), h)?;
        let ca = causal_cross_attention(g, store, &format!("{p}.cross_attn"), x, memory, mask, cfg.heads, cfg.cross_scale())?;
        h = g.add(h, ca.out)?;
        cross_attention = ca.per_head;
        let x = layer_norm(g, store, &format!("{p}.ln_ffn"), h)?;
        let f = ffn(g, store, &format!("{p}.ffn"), x)?;
        h = g.add(h, f)?;
    }
    let h = layer_norm(g, store, "decoder.final_ln", h)?;
    let (spans, logits) = heads(g, store, h)?;
    Ok(DecoderOutput { spans, logits, cross_attention })
}

/// Regression head (sigmoid `(center, length)` → clamped `(T_s, T_e)`) and
/// classification head.
pub fn heads(g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
    let r = linear(g, store, "decoder.reg.fc1", h)?;
    let r = g.relu(r)?;
    let r = linear(g, store, "decoder.reg.fc2", r)?;
    let center_length = g.sigmoid(r)?;
    let to_bounds = g.constant(Tensor::from_rows(&[&[1.0, 1.0], &[-0.5, 0.5]])?);
    let bounds = g.matmul(center_length, to_bounds)?;
    let spans = g.clamp(bounds, 0.0, 1.0)?;
    let logits = linear(g, store, "decoder.cls", h)?;
    Ok((spans, logits))
}

/// One candidate segment in frame units.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    pub start: f64,
    pub end: f64,
    pub logits: Vec<f64>,
}

/// Read the head outputs back as frame-unit candidates over `frames` frames.
pub fn predictions(g: &Graph, out: &DecoderOutput, frames: usize) -> Vec<QueryPrediction> {
    let spans = g.value(out.spans);
    let logits = g.value(out.logits);
    let n = frames as f64;
    (0..spans.shape()[0])
        .map(|q| QueryPrediction {
            start: spans.at2(q, 0) * n,
            end: spans.at2(q, 1) * n,
            logits: logits.row(q).to_vec(),
        })
        .collect()
}
