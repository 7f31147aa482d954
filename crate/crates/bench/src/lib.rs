//! Fixtures shared by the benchmarks.

use rand::Rng;
use stp_core::features::{generate_clip, SyntheticClip};
use stp_core::rng::stream_rng;
use stp_core::{ParamStore, StpConfig, Tensor};

/// One generated clip and freshly initialized parameters for `cfg`.
pub fn model_fixture(cfg: &StpConfig) -> (SyntheticClip, ParamStore) {
    let mut spec = cfg.data.clone();
    spec.clips = 1;
    let clip = generate_clip(&spec, cfg.seed, 0).expect("valid generator config");
    let store = stp_core::model::init_params(cfg, cfg.seed).expect("valid model config");
    (clip, store)
}

/// Uniform `[-1, 1)` matrix from a named stream.
pub fn random_matrix(seed: u64, index: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = stream_rng(seed, "bench", index);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}
