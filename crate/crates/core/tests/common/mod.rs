//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain tensors and loops, never on the tape.
#![allow(dead_code)]

use rand::Rng;
use rehub_core::graph::GraphCSR;
use rehub_core::tensor::Tensor;

/// Plain-value copy of one attention block's parameters.
pub struct DenseHead {
    pub w_src: Tensor,
    pub w_dst: Tensor,
    pub att: Tensor,
}

pub struct DenseAttention {
    pub heads: Vec<DenseHead>,
    pub w_out: Tensor,
}

impl DenseAttention {
    pub fn random<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Self {
        let dh = d / heads;
        Self {
            heads: (0..heads)
                .map(|_| DenseHead {
                    w_src: Tensor::uniform(d, dh, -1.0, 1.0, rng),
                    w_dst: Tensor::uniform(d, dh, -1.0, 1.0, rng),
                    att: Tensor::uniform(dh, 1, -1.0, 1.0, rng),
                })
                .collect(),
            w_out: Tensor::uniform(d, d, -1.0, 1.0, rng),
        }
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

/// Attention computed on full `n_q x n_k` score matrices, with non-edges set
/// to negative infinity before a row softmax. Returns the output and the
/// head-averaged weight matrix.
pub fn dense_masked_attention(k: &Tensor, q: &Tensor, mask: &[Vec<bool>], p: &DenseAttention) -> (Tensor, Vec<Vec<f64>>) {
    let (nk, nq) = (k.rows(), q.rows());
    let mut cat_cols = Vec::new();
    let mut alpha_avg = vec![vec![0.0; nk]; nq];
    for head in &p.heads {
        let ks = k.matmul(&head.w_src).unwrap();
        let qd = q.matmul(&head.w_dst).unwrap();
        let dh = ks.cols();
        let mut scores = vec![vec![f64::NEG_INFINITY; nk]; nq];
        for i in 0..nq {
            for j in 0..nk {
                if mask[i][j] {
                    let mut e = 0.0;
                    for c in 0..dh {
                        e += head.att.get(c, 0) * leaky(ks.get(j, c) + qd.get(i, c));
                    }
                    scores[i][j] = e;
                }
            }
        }
        let mut out = Tensor::zeros(nq, dh);
        for i in 0..nq {
            let m = scores[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let ex: Vec<f64> = scores[i].iter().map(|&s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..nk {
                let a = ex[j] / z;
                alpha_avg[i][j] += a / p.heads.len() as f64;
                for c in 0..dh {
                    out.set(i, c, out.get(i, c) + a * ks.get(j, c));
                }
            }
        }
        cat_cols.push(out);
    }
    let d_cat: usize = cat_cols.iter().map(Tensor::cols).sum();
    let cat = Tensor::from_fn(nq, d_cat, |i, j| {
        let mut j = j;
        for t in &cat_cols {
            if j < t.cols() {
                return t.get(i, j);
            }
            j -= t.cols();
        }
        unreachable!()
    });
    let mixed = cat.matmul(&p.w_out).unwrap();
    let out = Tensor::from_fn(nq, q.cols(), |i, j| q.get(i, j) + mixed.get(i, j));
    (out, alpha_avg)
}

/// Literal transcription of the reassignment algorithm on dense matrices:
/// `gamma` is `N_s x N_h` (zero where unconnected), `delta` is `N_h x N_h`.
/// Returns the new binary assignment matrix.
pub fn algorithm1(gamma: &[Vec<f64>], delta: &[Vec<f64>], k: usize) -> Vec<Vec<bool>> {
    let nh = delta.len();
    let k = k.min(nh);
    // Bottom-k by repeated selection of the smallest remaining value.
    let mut hood = Vec::with_capacity(nh);
    for row in delta {
        let mut taken = vec![false; nh];
        let mut picked = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..nh {
                if !taken[j] && best.is_none_or(|b| row[j] < row[b]) {
                    best = Some(j);
                }
            }
            taken[best.unwrap()] = true;
            picked.push(best.unwrap());
        }
        hood.push(picked);
    }
    gamma
        .iter()
        .map(|row| {
            let mut star = 0;
            for h in 1..nh {
                if row[h] > row[star] {
                    star = h;
                }
            }
            let mut e = vec![false; nh];
            for &h in &hood[star] {
                e[h] = true;
            }
            e
        })
        .collect()
}

/// Node accuracy of the rule "predict 1 iff a token lies within `hops`" on
/// token-task graphs. No node can do better after `hops` rounds of local
/// message passing.
pub fn token_within_hops_accuracy(graphs: &[GraphCSR], hops: usize) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for g in graphs {
        let labels = match g.labels().unwrap() {
            rehub_core::Labels::Class(v) => v.clone(),
            _ => panic!("token graphs carry class labels"),
        };
        let tokens: Vec<usize> = (0..g.num_nodes()).filter(|&v| g.node_features().get(v, 0) == 1.0).collect();
        for (v, &label) in labels.iter().enumerate() {
            let dist = bfs_dist(g, v);
            let pred = tokens.iter().any(|&t| dist[t] <= hops) as usize;
            correct += (pred == label) as usize;
            total += 1;
        }
    }
    correct as f64 / total as f64
}

fn bfs_dist(g: &GraphCSR, src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    let mut queue = std::collections::VecDeque::from([src]);
    dist[src] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

pub mod primitives;
pub mod checks;
