//! Transformer encoder over frame embeddings, processed in fixed-length
//! segments. Each layer's keys and values also cover the previous segment's
//! cached layer inputs, which never receive gradients.

use rand::Rng;

use crate::attention::{
    ffn, init_attention, init_ffn, init_layer_norm, layer_norm, multi_head_attention,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub segment_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 6, heads: 4, dim: 256, ffn_dim: 1024, segment_len: 16 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument(format!("encoder: sizes must be positive: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder: dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.segment_len == 0 {
            return Err(Error::InvalidArgument("encoder: segment length must be positive".into()));
        }
        Ok(())
    }

    /// Logit scale `1/√D` over the full embedding width.
    pub fn scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for m in 0..self.layers {
            let p = format!("encoder.layer{m}");
            init_layer_norm(store, &format!("{p}.ln1"), self.dim);
            init_attention(store, &format!("{p}.attn"), self.dim, rng);
            init_layer_norm(store, &format!("{p}.ln2"), self.dim);
            init_ffn(store, &format!("{p}.ffn"), self.dim, self.ffn_dim, rng);
        }
        init_layer_norm(store, "encoder.final_ln", self.dim);
    }
}

/// Per-layer inputs of the previous segment, one `t_prev × D` matrix per
/// layer, or nothing before the first segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncoderMemory {
    layers: Vec<Tensor>,
}

impl EncoderMemory {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_layers(layers: Vec<Tensor>) -> Self {
        Self { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }
}

pub struct SegmentOutput {
    /// Final-layer output after the closing layer norm, `t × D`.
    pub out: Var,
    /// Input to each layer, the states a following segment will cache.
    pub layer_inputs: Vec<Var>,
    pub new_memory: EncoderMemory,
    /// Attention nodes of every layer and head, in order.
    pub attention: Vec<Var>,
}

/// One segment through every layer, attending over `[memory; current]`.
pub fn encode_segment(
    g: &mut Graph,
    segment: Var,
    memory: &EncoderMemory,
    cfg: &EncoderConfig,
    store: &ParamStore,
) -> Result<SegmentOutput> {
    cfg.validate()?;
    let (_, d) = g.value(segment).dims2("encoder")?;
    if d != cfg.dim {
        return Err(Error::shape("encoder", format!("segment width {d}, expected D={}", cfg.dim)));
    }
    if !memory.is_empty() {
        if memory.layers.len() != cfg.layers {
            return Err(Error::shape(
                "encoder",
                format!("memory holds {} layers, encoder has {}", memory.layers.len(), cfg.layers),
            ));
        }
        if let Some(bad) = memory.layers.iter().find(|t| t.ndim() != 2 || t.shape()[1] != cfg.dim) {
            return Err(Error::shape("encoder", format!("cached state {:?} does not have width {}", bad.shape(), cfg.dim)));
        }
    }

    let mut h = segment;
    let mut layer_inputs = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::new();
    for m in 0..cfg.layers {
        layer_inputs.push(h);
        let p = format!("encoder.layer{m}");
        let context = match memory.layers.get(m) {
            Some(cached) => {
                let c = g.constant(cached.clone());
                g.concat_rows(&[c, h])?
            }
            None => h,
        };
        let q = layer_norm(g, store, &format!("{p}.ln1"), h)?;
        let kv = layer_norm(g, store, &format!("{p}.ln1"), context)?;
        let attn = multi_head_attention(g, store, &format!("{p}.attn"), q, kv, cfg.heads, cfg.scale(), None)?;
        attention.extend(attn.per_head);
        h = g.add(h, attn.out)?;
        let normed = layer_norm(g, store, &format!("{p}.ln2"), h)?;
        let f = ffn(g, store, &format!("{p}.ffn"), normed)?;
        h = g.add(h, f)?;
    }
    let out = layer_norm(g, store, "encoder.final_ln", h)?;
    let new_memory = EncoderMemory { layers: layer_inputs.iter().map(|&v| g.value(v).clone()).collect() };
    Ok(SegmentOutput { out, layer_inputs, new_memory, attention })
}

/// Split `frames` (`T × D`) into consecutive segments of `segment_len` rows
/// (the last may be shorter), thread the memory through them and stack the
/// outputs back into `T × D`.
pub fn encode_sequence(g: &mut Graph, frames: Var, cfg: &EncoderConfig, store: &ParamStore) -> Result<Var> {
    cfg.validate()?;
    let (t, _) = g.value(frames).dims2("encoder")?;
    if t == 0 {
        return Err(Error::shape("encoder", "empty frame sequence"));
    }
    let mut memory = EncoderMemory::empty();
    let mut outputs = Vec::with_capacity(t.div_ceil(cfg.segment_len));
    let mut start = 0;
    while start < t {
        let end = (start + cfg.segment_len).min(t);
        let seg = if start == 0 && end == t { frames } else { g.slice_rows(frames, start, end)? };
        let step = encode_segment(g, seg, &memory, cfg, store)?;
        outputs.push(step.out);
        memory = step.new_memory;
        start = end;
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        g.concat_rows(&outputs)
    }
}
