//! Seeded token-task splits shared by `train` and `analyze`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehub_core::graph::{batch, token_dataset};
use rehub_core::model::{accuracy, predict, Targets, Trace};
use rehub_core::{GraphCSR, ModelConfig, ModelState, PreparedBatch};

use crate::config::RunConfig;
use crate::Failure;

/// Independent seeds drawn from the master seed.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub train_data: u64,
    pub test_data: u64,
    pub model: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            train_data: rng.gen(),
            test_data: rng.gen(),
            model: rng.gen(),
            shuffle: rng.gen(),
        }
    }
}

pub fn check_task(rc: &RunConfig) -> Result<(), Failure> {
    match rc.raw("task") {
        "token" => Ok(()),
        other => Err(Failure::Config(format!("key `task`: unsupported task `{other}` (expected token)"))),
    }
}

/// Token-task graphs for the split `count` graphs of `path_len` nodes.
pub fn token_graphs(count: usize, path_len: usize, seed: u64) -> Result<Vec<GraphCSR>, Failure> {
    if count == 0 {
        return Err(Failure::Config("graph count must be positive".into()));
    }
    token_dataset(count, path_len, seed).map_err(|e| Failure::Config(format!("token task: {e}")))
}

/// Chunks graphs into prepared batches; batch `i` is prepared with `seed + i`.
pub fn batches(graphs: &[GraphCSR], batch_size: usize, cfg: &ModelConfig, seed: u64) -> Result<Vec<PreparedBatch>, Failure> {
    if batch_size == 0 {
        return Err(Failure::Config("key `batch_size`: must be positive".into()));
    }
    graphs
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| Ok(PreparedBatch::new(batch(chunk)?, cfg, seed.wrapping_add(i as u64))?))
        .collect()
}

/// Node accuracy over all batches, with every batch's trace.
pub fn evaluate(state: &ModelState, data: &[PreparedBatch]) -> Result<(f64, Vec<Trace>), Failure> {
    let mut correct = 0.0;
    let mut total = 0usize;
    let mut traces = Vec::with_capacity(data.len());
    for b in data {
        let (pred, trace) = predict(state, b)?;
        let Some(Targets::Classes(classes)) = b.targets() else {
            return Err(Failure::Runtime(anyhow::anyhow!("evaluation batch has no class labels")));
        };
        correct += accuracy(&pred, classes) * classes.len() as f64;
        total += classes.len();
        traces.push(trace);
    }
    Ok((if total == 0 { 0.0 } else { correct / total as f64 }, traces))
}

/// Utilization over the graphs of every trace, layer by layer.
pub fn utilization(traces: &[Trace]) -> rehub_core::metrics::UtilizationReport {
    let layers = traces.first().map_or(0, |t| t.layers.len());
    let per_layer: Vec<Vec<_>> = (0..layers)
        .map(|l| traces.iter().flat_map(|t| t.layers[l].assignments.iter()).collect())
        .collect();
    rehub_core::metrics::UtilizationReport::from_assignments(&per_layer)
}
