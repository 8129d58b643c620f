//! Splitting a spoke graph into one cluster per hub.
//!
//! `BfsBalanced` is the structural partitioner: farthest-point seeds followed
//! by smallest-first region growing. `Random` and `BalancedRandom` are the
//! unstructured baselines used in ablations.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::GraphCSR;
use crate::hubs::balanced_random_assignment;
use crate::names::named_enum;

named_enum! {
    pub enum ClusterStrategy {
        BfsBalanced => "bfs_balanced",
        Random => "random",
        BalancedRandom => "balanced_random",
    }
}

/// Cluster id per node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    cluster_of: Vec<usize>,
    cluster_count: usize,
}

impl Clustering {
    pub fn new(cluster_of: Vec<usize>, cluster_count: usize) -> Result<Self> {
        if let Some(&bad) = cluster_of.iter().find(|&&c| c >= cluster_count) {
            return Err(Error::InvalidParameter(format!(
                "cluster id {bad} out of range for {cluster_count} clusters"
            )));
        }
        Ok(Self {
            cluster_of,
            cluster_count,
        })
    }

    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_count
    }

    pub fn num_nodes(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count];
        for &c in &self.cluster_of {
            sizes[c] += 1;
        }
        sizes
    }

    /// Members of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (v, &c) in self.cluster_of.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    /// Same clusters after relabelling node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut cluster_of = vec![0; self.cluster_of.len()];
        for (v, &c) in self.cluster_of.iter().enumerate() {
            cluster_of[perm[v]] = c;
        }
        Self {
            cluster_of,
            cluster_count: self.cluster_count,
        }
    }
}

/// Partitions `g` into `n_clusters` groups.
pub fn cluster(g: &GraphCSR, n_clusters: usize, strategy: ClusterStrategy, seed: u64) -> Result<Clustering> {
    let n = g.num_nodes();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::InvalidParameter(format!(
            "n_clusters = {n_clusters} must lie in 1..={n}"
        )));
    }
    let cluster_of = match strategy {
        ClusterStrategy::BfsBalanced => bfs_balanced(g, n_clusters, seed),
        ClusterStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(0..n_clusters)).collect()
        }
        ClusterStrategy::BalancedRandom => {
            let a = balanced_random_assignment(n, n_clusters, 1, seed);
            (0..n).map(|i| a.hubs_of(i)[0]).collect()
        }
    };
    Clustering::new(cluster_of, n_clusters)
}

const UNSET: usize = usize::MAX;

/// Breadth-first distances from `src`, lowering `dist` only where the new
/// distance is shorter.
fn relax_from(g: &GraphCSR, src: usize, dist: &mut [usize], queue: &mut VecDeque<usize>) {
    dist[src] = 0;
    queue.clear();
    queue.push_back(src);
    while let Some(u) = queue.pop_front() {
        let du = dist[u] + 1;
        for &v in g.neighbors(u) {
            if du < dist[v] {
                dist[v] = du;
                queue.push_back(v);
            }
        }
    }
}

/// Lowest id with the largest value.
fn argmax(values: &[usize]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy farthest-point seeds: the first is the node farthest from a random
/// start, each next one maximizes its distance to the seeds chosen so far.
/// Unreachable nodes count as infinitely far, so every component gets a seed
/// before any component gets a second one.
fn farthest_point_sources(g: &GraphCSR, n_sources: usize, start: usize) -> Vec<usize> {
    let n = g.num_nodes();
    let mut queue = VecDeque::new();
    let mut dist = vec![UNSET; n];
    relax_from(g, start, &mut dist, &mut queue);
    let first = argmax(&dist);

    let mut min_dist = vec![UNSET; n];
    let mut sources = Vec::with_capacity(n_sources);
    sources.push(first);
    relax_from(g, first, &mut min_dist, &mut queue);
    while sources.len() < n_sources {
        let next = argmax(&min_dist);
        sources.push(next);
        relax_from(g, next, &mut min_dist, &mut queue);
    }
    sources
}

fn bfs_balanced(g: &GraphCSR, n_clusters: usize, seed: u64) -> Vec<usize> {
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.gen_range(0..n);
    let sources = farthest_point_sources(g, n_clusters, start);

    let mut cluster_of = vec![UNSET; n];
    let mut sizes = vec![0usize; n_clusters];
    let mut frontier: Vec<VecDeque<usize>> = vec![VecDeque::new(); n_clusters];
    let mut cap = n.div_ceil(n_clusters);
    let mut cap_lifted = false;
    let mut eligible: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut assigned = 0;
    let mut next_unassigned = 0;

    let absorb = |v: usize, c: usize, cluster_of: &mut [usize], sizes: &mut [usize], frontier: &mut [VecDeque<usize>]| {
        cluster_of[v] = c;
        sizes[c] += 1;
        frontier[c].extend(g.neighbors(v).iter().copied().filter(|&u| cluster_of[u] == UNSET));
    };

    for (c, &s) in sources.iter().enumerate() {
        absorb(s, c, &mut cluster_of, &mut sizes, &mut frontier);
        assigned += 1;
        if sizes[c] < cap {
            eligible.insert((sizes[c], c));
        }
    }

    while assigned < n {
        let Some(&(size, c)) = eligible.iter().next() else {
            if !cap_lifted {
                cap_lifted = true;
                cap = usize::MAX;
                eligible.extend((0..n_clusters).map(|c| (sizes[c], c)));
                continue;
            }
            // Nothing left to grow into: seed the smallest cluster with the
            // lowest stranded node.
            while cluster_of[next_unassigned] != UNSET {
                next_unassigned += 1;
            }
            let c = (0..n_clusters).min_by_key(|&c| (sizes[c], c)).unwrap();
            absorb(next_unassigned, c, &mut cluster_of, &mut sizes, &mut frontier);
            assigned += 1;
            eligible.insert((sizes[c], c));
            continue;
        };
        eligible.remove(&(size, c));
        let mut picked = None;
        while let Some(v) = frontier[c].pop_front() {
            if cluster_of[v] == UNSET {
                picked = Some(v);
                break;
            }
        }
        let Some(v) = picked else { continue };
        absorb(v, c, &mut cluster_of, &mut sizes, &mut frontier);
        assigned += 1;
        if sizes[c] < cap {
            eligible.insert((sizes[c], c));
        }
    }
    cluster_of
}
