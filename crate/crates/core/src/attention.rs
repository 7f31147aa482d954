//! Multi-head attention and the small blocks shared by encoder and decoder.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, Graph, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, path: &str, d_in: usize, d_out: usize, rng: &mut R) {
    store.insert(format!("{path}.weight"), init::xavier_uniform(rng, d_in, d_out));
    store.insert(format!("{path}.bias"), Tensor::zeros(&[d_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, path: &str, dim: usize) {
    store.insert(format!("{path}.gamma"), Tensor::ones(&[dim]));
    store.insert(format!("{path}.beta"), Tensor::zeros(&[dim]));
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, path: &str, dim: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{path}.{proj}"), dim, dim, rng);
    }
}

pub(crate) fn init_ffn<R: Rng + ?Sized>(store: &mut ParamStore, path: &str, dim: usize, hidden: usize, rng: &mut R) {
    init_linear(store, &format!("{path}.fc1"), dim, hidden, rng);
    init_linear(store, &format!("{path}.fc2"), hidden, dim, rng);
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, path: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{path}.weight"))?;
    let b = g.param(store, &format!("{path}.bias"))?;
    g.linear(x, w, b)
}

pub(crate) fn layer_norm(g: &mut Graph, store: &ParamStore, path: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{path}.gamma"))?;
    let beta = g.param(store, &format!("{path}.beta"))?;
    g.layer_norm_rows(x, gamma, beta, LAYER_NORM_EPS)
}

pub(crate) fn ffn(g: &mut Graph, store: &ParamStore, path: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{path}.fc1"), x)?;
    let h = g.relu(h)?;
    linear(g, store, &format!("{path}.fc2"), h)
}

/// Output of one attention call; `per_head` holds the fused attention nodes
/// whose weights can be read back with [`Graph::attention_weights`].
pub struct AttentionOutput {
    pub out: Var,
    pub per_head: Vec<Var>,
}

/// `heads` independent attentions over equal channel slices of the projected
/// queries, keys and values, merged by the output projection. Query row `i`
/// reads key rows `0..prefix[i]`; `None` means every row.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    path: &str,
    queries: Var,
    keys_values: Var,
    heads: usize,
    scale: f64,
    prefix: Option<Arc<[usize]>>,
) -> Result<AttentionOutput> {
    let (m, dim) = g.value(queries).dims2("attention")?;
    let (n, kv_dim) = g.value(keys_values).dims2("attention")?;
    if heads == 0 || dim % heads != 0 || kv_dim != dim {
        return Err(Error::shape(
            "attention",
            format!("{heads} heads over queries {:?} and keys {:?}", g.shape(queries), g.shape(keys_values)),
        ));
    }
    let prefix = prefix.unwrap_or_else(|| vec![n; m].into());
    let q = linear(g, store, &format!("{path}.q"), queries)?;
    let k = linear(g, store, &format!("{path}.k"), keys_values)?;
    let v = linear(g, store, &format!("{path}.v"), keys_values)?;
    let dh = dim / heads;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        per_head.push(g.prefix_attention(qh, kh, vh, prefix.clone(), scale)?);
    }
    let merged = if heads == 1 { per_head[0] } else { g.concat_cols(&per_head)? };
    let out = linear(g, store, &format!("{path}.o"), merged)?;
    Ok(AttentionOutput { out, per_head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_head_matches_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", 6, &mut rng);
        let x = init::normal(&mut rng, &[4, 6], 1.0);
        let y = init::normal(&mut rng, &[5, 6], 1.0);
        let scale = 1.0 / 6f64.sqrt();

        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let out = multi_head_attention(&mut g, &store, "a", xv, yv, 1, scale, None).unwrap().out;

        // Plain: softmax(Q Kᵀ s) V, then output projection.
        let mut g2 = Graph::new();
        let (xv, yv) = (g2.constant(x), g2.constant(y));
        let q = linear(&mut g2, &store, "a.q", xv).unwrap();
        let k = linear(&mut g2, &store, "a.k", yv).unwrap();
        let v = linear(&mut g2, &store, "a.v", yv).unwrap();
        let kt = g2.transpose(k).unwrap();
        let logits = g2.matmul(q, kt).unwrap();
        let logits = g2.scale(logits, scale).unwrap();
        let w = g2.softmax_rows(logits).unwrap();
        let h = g2.matmul(w, v).unwrap();
        let plain = linear(&mut g2, &store, "a.o", h).unwrap();
        assert!(g.value(out).max_abs_diff(g2.value(plain)) < 1e-12);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", 6, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        assert!(multi_head_attention(&mut g, &store, "a", x, x, 4, 1.0, None).is_err());
    }
}
