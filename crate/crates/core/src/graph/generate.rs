use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphCSR, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature row of the node that carries the token.
pub const TOKEN: [f64; 2] = [1.0, 0.0];
/// Feature row of every other node.
pub const NO_TOKEN: [f64; 2] = [0.0, 1.0];

const REGULAR_FEATURE_DIM: usize = 4;
const REGULAR_EDGE_DIM: usize = 1;
const MAX_PAIRING_ATTEMPTS: usize = 100_000;

/// Uniformly sampled simple `d`-regular graph on `n` nodes (pairing model,
/// restarting on any self-loop or repeated edge).
///
/// Node features (4 columns), edge attributes (1 column) and binary node
/// labels are filled with seeded random values.
pub fn random_regular(n: usize, d: usize, seed: u64) -> Result<GraphCSR> {
    random_regular_with_dims(n, d, REGULAR_FEATURE_DIM, REGULAR_EDGE_DIM, seed)
}

pub fn random_regular_with_dims(
    n: usize,
    d: usize,
    feature_dim: usize,
    edge_dim: usize,
    seed: u64,
) -> Result<GraphCSR> {
    if !(n * d).is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("n*d = {} must be even", n * d)));
    }
    if d >= n {
        return Err(Error::InvalidParameter(format!("degree {d} must be below n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = pairing_edges(n, d, &mut rng)?;
    let features = Tensor::uniform(n, feature_dim, 0.0, 1.0, &mut rng);
    let attrs = Tensor::uniform(edges.len(), edge_dim, 0.0, 1.0, &mut rng);
    let labels = (0..n).map(|_| rng.gen_range(0..2)).collect();
    GraphCSR::from_edges(n, &edges, features, Some(attrs), Some(Labels::Class(labels)))
}

fn pairing_edges(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let mut points: Vec<usize> = (0..n * d).map(|p| p / d).collect();
    let mut seen = HashSet::with_capacity(n * d / 2);
    let mut edges = Vec::with_capacity(n * d / 2);
    'attempt: for _ in 0..MAX_PAIRING_ATTEMPTS {
        points.shuffle(rng);
        seen.clear();
        edges.clear();
        for pair in points.chunks_exact(2) {
            let (u, v) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            if u == v || !seen.insert((u, v)) {
                continue 'attempt;
            }
            edges.push((u, v));
        }
        return Ok(edges);
    }
    Err(Error::InvalidParameter(format!(
        "no simple {d}-regular pairing on {n} nodes after {MAX_PAIRING_ATTEMPTS} attempts"
    )))
}

/// Path graph of `n` nodes for the long-range broadcast task.
///
/// When `positive`, one uniformly chosen node carries the token. Every node
/// is labelled with the graph-level bit "some node carries the token".
pub fn gen_token_task(n: usize, positive: bool, seed: u64) -> Result<GraphCSR> {
    if n < 4 {
        return Err(Error::InvalidParameter(format!("token task needs n >= 4, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_at = positive.then(|| rng.gen_range(0..n));
    let features = Tensor::from_fn(n, 2, |i, j| {
        if Some(i) == token_at {
            TOKEN[j]
        } else {
            NO_TOKEN[j]
        }
    });
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    let labels = Labels::Class(vec![usize::from(positive); n]);
    GraphCSR::from_edges(n, &edges, features, None, Some(labels))
}

/// `count` token-task graphs with exactly alternating classes (even indices
/// positive), each drawn from its own seed derived from `seed`.
pub fn token_dataset(count: usize, n: usize, seed: u64) -> Result<Vec<GraphCSR>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| gen_token_task(n, i % 2 == 0, rng.gen()))
        .collect()
}
