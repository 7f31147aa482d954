//! Input streams: temporal features with positional embeddings, keypoint
//! distance features through a skeleton GCN, and the synthetic clip source.

mod clip_io;
pub mod gcn;
mod keypoints;
pub mod skeleton;
mod synthetic;

pub use clip_io::{read_clip, read_dataset, write_clip, write_dataset, Annotations, SegmentRecord};
pub use gcn::{gcn_distance_features, gcn_pooled, node_features, GcnConfig, NODE_FEATURES};
pub use keypoints::{pairwise_distances, KeypointSequence, INVISIBLE_DISTANCE};
pub use synthetic::{generate_synthetic_dataset, generate_clip, GeneratorSpec, SyntheticClip, CLASS_PAIRS};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Dense per-frame features stored as `T × C × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    data: Tensor,
}

impl FeatureClip {
    pub fn new(data: Tensor) -> Result<Self> {
        match data.shape() {
            [t, c, l] if *t > 0 && *c > 0 && *l > 0 => Ok(Self { data }),
            s => Err(Error::Input(format!("feature clip needs positive T×C×L, got {s:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Token-major view: `(T·L) × C`, row `t·L + l` holding channel vector
    /// `data[t, :, l]`.
    pub fn to_rows(&self) -> Tensor {
        let (t, c, l) = (self.frames(), self.channels(), self.width());
        let src = self.data.data();
        let mut out = vec![0.0; t * l * c];
        for f in 0..t {
            for ch in 0..c {
                for w in 0..l {
                    out[(f * l + w) * c + ch] = src[(f * c + ch) * l + w];
                }
            }
        }
        Tensor::new(vec![t * l, c], out).expect("consistent shape")
    }

    /// Inverse of [`FeatureClip::to_rows`].
    pub fn from_rows(rows: &Tensor, width: usize) -> Result<Self> {
        let (tl, c) = rows.dims2("feature_clip")?;
        if width == 0 || tl % width != 0 {
            return Err(Error::shape("feature_clip", format!("{tl} rows are not frames of width {width}")));
        }
        let t = tl / width;
        let mut out = vec![0.0; tl * c];
        for f in 0..t {
            for ch in 0..c {
                for w in 0..width {
                    out[(f * c + ch) * width + w] = rows.data()[(f * width + w) * c + ch];
                }
            }
        }
        Self::new(Tensor::new(vec![t, c, width], out)?)
    }
}

/// Fixed sinusoidal table `T × C`: channel `2i` is `sin(t / 10000^{2i/C})`,
/// channel `2i+1` the matching cosine.
pub fn positional_embedding(frames: usize, channels: usize) -> Result<Tensor> {
    if frames == 0 || channels == 0 || channels % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional embedding needs positive T and even C, got T={frames}, C={channels}"
        )));
    }
    let mut data = vec![0.0; frames * channels];
    for t in 0..frames {
        for i in 0..channels / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / channels as f64);
            data[t * channels + 2 * i] = angle.sin();
            data[t * channels + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![frames, channels], data)
}
