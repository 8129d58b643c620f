//! Fixtures shared by the benchmarks.

use rehub_core::graph::{batch, random_regular_with_dims};
use rehub_core::metrics::SCALING_DEGREE;
use rehub_core::{Arch, ModelConfig, ModelState, PreparedBatch};

/// The small configuration the scaling sweep uses.
pub fn bench_config(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        input_dim: 4,
        hidden_dim: 8,
        heads: 2,
        layers: 1,
        ..ModelConfig::default()
    }
}

/// A degree-3 random regular graph of `n` nodes, prepared for `cfg`.
pub fn regular_input(cfg: &ModelConfig, n: usize, seed: u64) -> PreparedBatch {
    let g = random_regular_with_dims(n, SCALING_DEGREE, cfg.input_dim, 1, seed).expect("n*3 even");
    PreparedBatch::new(batch(&[g]).expect("one graph"), cfg, seed).expect("valid config")
}

pub fn model(cfg: &ModelConfig) -> ModelState {
    ModelState::new(cfg).expect("valid config")
}
