//! Dual feature interaction: each stream trades its last `k` channels with
//! the other before a per-token fully connected remix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureClip;
use crate::numerics::{init, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    /// Channels taken from the other stream.
    pub k: usize,
    pub channels: usize,
}

impl FusionConfig {
    pub fn new(k: usize, channels: usize) -> Result<Self> {
        if k > channels {
            return Err(Error::InvalidArgument(format!("fusion: k={k} exceeds C={channels}")));
        }
        Ok(Self { k, channels })
    }

    /// `k = C/4`.
    pub fn with_default_k(channels: usize) -> Self {
        Self { k: channels / 4, channels }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for stream in ["temporal", "distance"] {
            store.insert(format!("fusion.{stream}.weight"), init::xavier_uniform(rng, self.channels, self.channels));
            store.insert(format!("fusion.{stream}.bias"), Tensor::zeros(&[self.channels]));
        }
    }
}

/// Stack `a[C1×L]` on top of `b[C2×L]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c1, l1) = a.dims2("concat_channels")?;
    let (c2, l2) = b.dims2("concat_channels")?;
    if l1 != l2 {
        return Err(Error::shape("concat_channels", format!("widths {l1} and {l2} differ")));
    }
    let mut data = Vec::with_capacity((c1 + c2) * l1);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![c1 + c2, l1], data)
}

/// `[own[:C-k], other[C-k:]]` along the channel (column) axis of token rows.
fn shifted(g: &mut Graph, own: Var, other: Var, k: usize, c: usize) -> Result<Var> {
    let keep = c - k;
    let mut parts = Vec::with_capacity(2);
    if keep > 0 {
        parts.push(g.slice_cols(own, 0, keep)?);
    }
    if k > 0 {
        parts.push(g.slice_cols(other, keep, c)?);
    }
    g.concat_cols(&parts)
}

/// Both streams as token rows `N × C` (one row per frame and width slot).
/// Returns the remixed `(x̂p, x̂d)`, same shapes.
pub fn interact(
    g: &mut Graph,
    xp: Var,
    xd: Var,
    cfg: &FusionConfig,
    store: &ParamStore,
) -> Result<(Var, Var)> {
    if g.shape(xp) != g.shape(xd) {
        return Err(Error::shape(
            "fusion",
            format!("temporal stream {:?} vs distance stream {:?}", g.shape(xp), g.shape(xd)),
        ));
    }
    let (_, c) = g.value(xp).dims2("fusion")?;
    if c != cfg.channels || cfg.k > c {
        return Err(Error::shape("fusion", format!("streams have {c} channels, config C={} k={}", cfg.channels, cfg.k)));
    }
    let in_p = shifted(g, xp, xd, cfg.k, c)?;
    let in_d = shifted(g, xd, xp, cfg.k, c)?;
    let wp = g.param(store, "fusion.temporal.weight")?;
    let bp = g.param(store, "fusion.temporal.bias")?;
    let wd = g.param(store, "fusion.distance.weight")?;
    let bd = g.param(store, "fusion.distance.bias")?;
    let out_p = g.linear(in_p, wp, bp)?;
    let out_d = g.linear(in_d, wd, bd)?;
    Ok((out_p, out_d))
}

/// [`interact`] on whole clips, outside any training graph.
pub fn interact_clips(
    xp: &FeatureClip,
    xd: &FeatureClip,
    cfg: &FusionConfig,
    store: &ParamStore,
) -> Result<(FeatureClip, FeatureClip)> {
    if xp.tensor().shape() != xd.tensor().shape() {
        return Err(Error::shape(
            "fusion",
            format!("temporal clip {:?} vs distance clip {:?}", xp.tensor().shape(), xd.tensor().shape()),
        ));
    }
    let mut g = Graph::new();
    let p = g.constant(xp.to_rows());
    let d = g.constant(xd.to_rows());
    let (op, od) = interact(&mut g, p, d, cfg, store)?;
    Ok((
        FeatureClip::from_rows(g.value(op), xp.width())?,
        FeatureClip::from_rows(g.value(od), xd.width())?,
    ))
}
