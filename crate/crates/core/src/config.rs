//! The global `key = value` configuration file.
//!
//! Keys are dotted (`encoder.layers = 6`), one per line; `#` starts a
//! comment. Every key listed in [`StpConfig::KEYS`] must be present exactly
//! once and no other key is accepted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::{DecoderConfig, MaskRule};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{GcnConfig, GeneratorSpec};
use crate::fusion::FusionConfig;
use crate::training::{AdamWConfig, LossConfig, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::InvalidArgument(format!("unknown reduction '{other}' (expected mean or sum)"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub power: f64,
    pub adamw: AdamWConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub reduction: Reduction,
    pub checkpoint_every: usize,
    /// Epochs between training-set AO evaluations; the last epoch is always
    /// evaluated.
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sigma: f64,
    pub threshold: f64,
    pub allow_reuse: bool,
}

/// Switches that remove one component of the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub distance_stream: bool,
    /// When off, the temporal stream is the positional embedding alone.
    pub temporal_stream: bool,
    /// When off, the streams do not exchange channels (`k = 0`).
    pub fusion: bool,
    /// When off, every query sees every frame.
    pub causal_mask: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { distance_stream: true, temporal_stream: true, fusion: true, causal_mask: true }
    }
}

impl Ablation {
    /// Named presets used by `--ablate`.
    pub fn preset(name: &str) -> Result<Self> {
        let full = Self::default();
        Ok(match name {
            "none" | "full" => full,
            "no_distance" | "temporal_only" => Self { distance_stream: false, ..full },
            "no_temporal" | "spatial_only" => Self { temporal_stream: false, ..full },
            "no_fusion" => Self { fusion: false, ..full },
            "no_causal_mask" => Self { causal_mask: false, ..full },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation '{other}' (expected none, no_distance, no_temporal, no_fusion, no_causal_mask)"
                )))
            }
        })
    }

    pub fn label(&self) -> String {
        let off: Vec<&str> = [
            (self.distance_stream, "no_distance"),
            (self.temporal_stream, "no_temporal"),
            (self.fusion, "no_fusion"),
            (self.causal_mask, "no_causal_mask"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if off.is_empty() {
            "full".into()
        } else {
            off.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StpConfig {
    pub seed: u64,
    pub data: GeneratorSpec,
    pub gcn: GcnConfig,
    pub fusion_k: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: Ablation,
}

impl Default for StpConfig {
    fn default() -> Self {
        let data = GeneratorSpec::default();
        let encoder = EncoderConfig::default();
        Self {
            seed: 0,
            fusion_k: data.channels / 4,
            gcn: GcnConfig::default(),
            decoder: DecoderConfig { dim: encoder.dim, classes: data.classes, ..DecoderConfig::default() },
            encoder,
            data,
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 50,
                batch_size: 8,
                lr: 1e-3,
                schedule: Schedule::CosinePower,
                power: 0.9,
                adamw: AdamWConfig::default(),
                grad_clip: 1.0,
                reduction: Reduction::Mean,
                checkpoint_every: 1,
                eval_every: 5,
            },
            eval: EvalConfig { sigma: 0.5, threshold: 0.2, allow_reuse: false },
            ablation: Ablation::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("key `{key}`: cannot parse '{raw}': {e}"))
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ ),* $(,)?) => {
        impl StpConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
                match key {
                    $( $key => self.$($field).+ = parse_value(key, raw)?, )*
                    other => return Err(format!("unknown key `{other}`")),
                }
                Ok(())
            }

            fn get(&self, key: &str) -> String {
                match key {
                    $( $key => self.$($field).+.to_string(), )*
                    _ => unreachable!("key list and accessors are generated together"),
                }
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "data.clips" => data.clips,
    "data.frames" => data.frames,
    "data.classes" => data.classes,
    "data.min_segments" => data.min_segments,
    "data.max_segments" => data.max_segments,
    "data.min_len" => data.min_len,
    "data.max_len" => data.max_len,
    "data.channels" => data.channels,
    "data.width" => data.width,
    "data.signal_rank" => data.signal_rank,
    "data.signal_strength" => data.signal_strength,
    "data.feature_noise" => data.feature_noise,
    "data.keypoint_noise" => data.keypoint_noise,
    "data.occlusion" => data.occlusion,
    "data.boundary_blur" => data.boundary_blur,
    "data.stride" => data.stride,
    "gcn.layers" => gcn.layers,
    "gcn.hidden" => gcn.hidden,
    "gcn.standardize" => gcn.standardize,
    "fusion.k" => fusion_k,
    "encoder.layers" => encoder.layers,
    "encoder.heads" => encoder.heads,
    "encoder.dim" => encoder.dim,
    "encoder.ffn_dim" => encoder.ffn_dim,
    "encoder.segment_len" => encoder.segment_len,
    "decoder.num_queries" => decoder.num_queries,
    "decoder.blocks" => decoder.blocks,
    "decoder.heads" => decoder.heads,
    "decoder.ffn_dim" => decoder.ffn_dim,
    "decoder.mask_rule" => decoder.mask_rule,
    "decoder.scale_logits" => decoder.scale_logits,
    "loss.lambda_cls" => loss.lambda_cls,
    "loss.lambda_reg" => loss.lambda_reg,
    "loss.gamma" => loss.gamma,
    "loss.alpha" => loss.alpha,
    "train.epochs" => train.epochs,
    "train.batch_size" => train.batch_size,
    "train.lr" => train.lr,
    "train.schedule" => train.schedule,
    "train.power" => train.power,
    "train.beta1" => train.adamw.beta1,
    "train.beta2" => train.adamw.beta2,
    "train.eps" => train.adamw.eps,
    "train.weight_decay" => train.adamw.weight_decay,
    "train.grad_clip" => train.grad_clip,
    "train.reduction" => train.reduction,
    "train.checkpoint_every" => train.checkpoint_every,
    "train.eval_every" => train.eval_every,
    "eval.sigma" => eval.sigma,
    "eval.threshold" => eval.threshold,
    "eval.allow_reuse" => eval.allow_reuse,
    "ablation.distance_stream" => ablation.distance_stream,
    "ablation.temporal_stream" => ablation.temporal_stream,
    "ablation.fusion" => ablation.fusion,
    "ablation.causal_mask" => ablation.causal_mask,
}

impl StpConfig {
    /// The smallest full model: T=8, D=16, one encoder layer, one decoder
    /// block, four queries. One encoder segment covers the clip, so no
    /// detached cache sits between the inputs and the loss.
    pub fn minimal() -> Self {
        let mut cfg = Self::default();
        cfg.data = GeneratorSpec {
            clips: 2,
            frames: 8,
            classes: 2,
            min_segments: 1,
            max_segments: 2,
            min_len: 2,
            max_len: 3,
            channels: 4,
            width: 2,
            stride: 1,
            ..GeneratorSpec::default()
        };
        cfg.gcn.hidden = 4;
        cfg.fusion_k = 1;
        cfg.encoder = EncoderConfig { layers: 1, heads: 2, dim: 16, ffn_dim: 8, segment_len: 8 };
        cfg.decoder.num_queries = 4;
        cfg.decoder.blocks = 1;
        cfg.decoder.heads = 2;
        cfg.decoder.ffn_dim = 8;
        cfg.sync();
        cfg
    }

    /// Small model for overfitting runs: 64 clips of 64 frames, 3 classes,
    /// 1 to 2 segments each, 2 encoder layers, D=64, 8 queries.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.data.clips = 64;
        cfg.data.frames = 64;
        cfg.data.classes = 3;
        cfg.data.min_segments = 1;
        cfg.data.max_segments = 2;
        cfg.data.channels = 32;
        cfg.data.width = 1;
        cfg.gcn.hidden = 32;
        cfg.fusion_k = 8;
        cfg.encoder = EncoderConfig { layers: 2, heads: 4, dim: 64, ffn_dim: 128, segment_len: 16 };
        cfg.decoder.num_queries = 8;
        cfg.decoder.blocks = 2;
        cfg.decoder.heads = 4;
        cfg.decoder.ffn_dim = 128;
        cfg.train.epochs = 200;
        cfg.train.batch_size = 8;
        cfg.train.lr = 1e-3;
        cfg.train.checkpoint_every = 25;
        cfg.train.eval_every = 25;
        cfg.sync();
        cfg
    }

    /// Preset by name: `default`, `toy` or `minimal`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            "minimal" => Ok(Self::minimal()),
            other => Err(Error::InvalidArgument(format!("unknown preset '{other}' (expected default, toy, minimal)"))),
        }
    }

    /// Parse config text; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| Error::Config { path: path.to_path_buf(), message };
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cfg = Self::default();
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("line {line_no}: expected `key = value`, got '{line}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line_no) {
                return Err(err(format!("line {line_no}: key `{key}` already set on line {first}")));
            }
            cfg.set(key, value).map_err(|m| err(format!("line {line_no}: {m}")))?;
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains_key(**k)) {
            return Err(err(format!("missing key `{missing}`")));
        }
        cfg.sync();
        cfg.validate().map_err(|e| err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            path: PathBuf::from(path),
            message: format!("cannot read: {e}"),
        })?;
        Self::parse(&text, path)
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key));
        }
        out
    }

    /// Copy shared sizes into the sub-configs that repeat them.
    pub fn sync(&mut self) {
        self.decoder.dim = self.encoder.dim;
        self.decoder.classes = self.data.classes;
    }

    pub fn fusion(&self) -> FusionConfig {
        let k = if self.ablation.fusion { self.fusion_k } else { 0 };
        FusionConfig { k, channels: self.data.channels }
    }

    /// Width of one flattened frame before the encoder projection.
    pub fn frame_width(&self) -> usize {
        self.data.channels * self.data.width
    }

    pub fn mask_rule(&self) -> MaskRule {
        if self.ablation.causal_mask {
            self.decoder.mask_rule
        } else {
            MaskRule::Full
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.dim != self.encoder.dim || self.decoder.classes != self.data.classes {
            return Err(Error::InvalidArgument("decoder sizes out of sync with encoder/data; call sync()".into()));
        }
        if self.gcn.layers == 0 {
            return Err(Error::InvalidArgument("gcn.layers must be positive".into()));
        }
        if self.data.channels % 2 != 0 {
            return Err(Error::InvalidArgument("data.channels must be even for the positional embedding".into()));
        }
        if self.fusion_k > self.data.channels {
            return Err(Error::InvalidArgument(format!(
                "fusion.k={} exceeds data.channels={}",
                self.fusion_k, self.data.channels
            )));
        }
        if self.decoder.num_queries < self.data.max_segments {
            return Err(Error::InvalidArgument(format!(
                "decoder.num_queries={} is below data.max_segments={}",
                self.decoder.num_queries, self.data.max_segments
            )));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.checkpoint_every == 0 || t.eval_every == 0 {
            return Err(Error::InvalidArgument("train epochs, batch_size, checkpoint_every, eval_every must be positive".into()));
        }
        if !(t.lr > 0.0) || t.grad_clip < 0.0 || t.power < 0.0 {
            return Err(Error::InvalidArgument("train.lr must be positive, grad_clip and power non-negative".into()));
        }
        let l = &self.loss;
        if [l.lambda_cls, l.lambda_reg, l.gamma, l.alpha].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.eval.sigma > 0.0) {
            return Err(Error::InvalidArgument("eval.sigma must be positive".into()));
        }
        Ok(())
    }
}
