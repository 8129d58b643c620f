//! Hub lifecycle: hub counts, hub features, spoke→hub assignments and the
//! per-layer reassignment.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Linear;
use crate::error::{Error, Result};
use crate::names::named_enum;
use crate::partition::Clustering;
use crate::tensor::{SegmentIndex, Tape, Tensor, Var};

named_enum! {
    /// How hub features are initialized.
    pub enum HubInit {
        ClusterMean => "cluster_mean",
        Learned => "learned",
    }
}

named_enum! {
    /// How the first-layer assignment is built.
    pub enum AssignmentStrategy {
        FeatureSimilarity => "feature_similarity",
        Random => "random",
        BalancedRandom => "balanced_random",
    }
}

named_enum! {
    /// How assignments change between layers.
    pub enum ReassignStrategy {
        Attention => "attention",
        None => "none",
        Random => "random",
        BalancedRandom => "balanced_random",
    }
}

/// `max(1, round(ratio * sqrt(n_spokes)))`, never more than `n_spokes`.
pub fn num_hubs(n_spokes: usize, ratio: f64) -> usize {
    let n = (ratio * (n_spokes as f64).sqrt()).round() as usize;
    n.max(1).min(n_spokes.max(1))
}

/// Hubs per spoke actually used when a graph has fewer than `k` hubs.
pub fn k_eff(k: usize, n_hubs: usize) -> usize {
    k.min(n_hubs)
}

/// Spoke→hub incidence with the same number of distinct hubs on every row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentMatrix {
    n_spokes: usize,
    n_hubs: usize,
    k: usize,
    /// Spoke-major: spoke `i` owns `hubs[i*k..(i+1)*k]`.
    hubs: Vec<usize>,
}

impl AssignmentMatrix {
    pub fn from_flat(n_spokes: usize, n_hubs: usize, k: usize, hubs: Vec<usize>) -> Result<Self> {
        if hubs.len() != n_spokes * k {
            return Err(Error::Contract(format!(
                "{} hub ids for {n_spokes} spokes with k = {k}",
                hubs.len()
            )));
        }
        if k > n_hubs || (k == 0 && n_spokes > 0) {
            return Err(Error::Contract(format!("k = {k} invalid for {n_hubs} hubs")));
        }
        for (i, row) in hubs.chunks(k.max(1)).enumerate() {
            for (j, &h) in row.iter().enumerate() {
                if h >= n_hubs {
                    return Err(Error::Contract(format!("spoke {i}: hub {h} out of range")));
                }
                if row[..j].contains(&h) {
                    return Err(Error::Contract(format!("spoke {i}: hub {h} listed twice")));
                }
            }
        }
        Ok(Self {
            n_spokes,
            n_hubs,
            k,
            hubs,
        })
    }

    pub fn from_rows(n_hubs: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("rows of unequal length".into()));
        }
        Self::from_flat(rows.len(), n_hubs, k, rows.concat())
    }

    pub fn n_spokes(&self) -> usize {
        self.n_spokes
    }

    pub fn n_hubs(&self) -> usize {
        self.n_hubs
    }

    /// Hubs per spoke.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hubs_of(&self, spoke: usize) -> &[usize] {
        &self.hubs[spoke * self.k..(spoke + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.hubs
    }

    /// `(spoke, hub)` pairs in spoke-major order.
    pub fn connections(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.hubs.iter().enumerate().map(move |(i, &h)| (i / self.k, h))
    }

    pub fn num_connections(&self) -> usize {
        self.hubs.len()
    }

    /// Number of spokes wired to each hub.
    pub fn hub_loads(&self) -> Vec<usize> {
        let mut loads = vec![0; self.n_hubs];
        for &h in &self.hubs {
            loads[h] += 1;
        }
        loads
    }

    /// The same wiring after relabelling spoke `i` as `perm[i]`.
    pub fn permuted_spokes(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_spokes, "permutation length");
        let mut hubs = vec![0; self.hubs.len()];
        for (i, &p) in perm.iter().enumerate() {
            hubs[p * self.k..(p + 1) * self.k].copy_from_slice(self.hubs_of(i));
        }
        Self { hubs, ..self.clone() }
    }
}

/// Attention weights aligned entry-for-entry with an assignment's connection
/// list, averaged over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnScores {
    scores: Vec<f64>,
    heads: usize,
}

impl AttnScores {
    pub fn new(scores: Vec<f64>, heads: usize, assignment: &AssignmentMatrix) -> Result<Self> {
        if scores.len() != assignment.num_connections() {
            return Err(Error::Contract(format!(
                "{} scores for {} connections",
                scores.len(),
                assignment.num_connections()
            )));
        }
        Ok(Self { scores, heads })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Symmetric matrix of squared Euclidean distances between hub features.
#[derive(Clone, Debug, PartialEq)]
pub struct HubDistances {
    n: usize,
    data: Vec<f64>,
}

impl HubDistances {
    pub fn n_hubs(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn hub_distances(hub_feats: &Tensor) -> HubDistances {
    let n = hub_feats.rows();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = hub_feats
                .row(i)
                .iter()
                .zip(hub_feats.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    HubDistances { n, data }
}

/// Indices of the `k` smallest values, ordered by `(value, index)`.
pub fn bottom_k_indices(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > row.len() {
        return Err(Error::InvalidParameter(format!("k = {k} exceeds row length {}", row.len())));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Where initial hub features come from.
pub enum HubFeatureSource<'a> {
    /// Mean of each cluster's spoke features, optionally passed through
    /// `relu(x W + b)` first. Empty clusters give zero rows.
    ClusterMean { encoder: Option<&'a Linear> },
    /// Rows of a learned matrix; row `h` is hub `h`.
    Learned(Var),
}

/// Initial hub features, one row per cluster.
pub fn init_hub_features(
    tape: &mut Tape,
    spokes: Var,
    clusters: &Clustering,
    source: HubFeatureSource<'_>,
) -> Result<Var> {
    let n_hubs = clusters.cluster_count();
    match source {
        HubFeatureSource::ClusterMean { encoder } => {
            let x = match encoder {
                Some(lin) => {
                    let h = lin.apply(tape, spokes)?;
                    tape.relu(h)
                }
                None => spokes,
            };
            let seg = SegmentIndex::new(clusters.cluster_of().to_vec(), n_hubs)?;
            tape.segment_mean(x, seg.into())
        }
        HubFeatureSource::Learned(p) => {
            let rows = tape.shape(p).0;
            if rows < n_hubs {
                return Err(Error::Contract(format!("learned hub matrix has {rows} rows for {n_hubs} hubs")));
            }
            if rows == n_hubs {
                Ok(p)
            } else {
                let idx: Vec<usize> = (0..n_hubs).collect();
                tape.gather_rows(p, idx.into())
            }
        }
    }
}

/// Each spoke keeps its cluster's hub and adds the `k_eff - 1` hubs whose
/// features are nearest to that hub (self excluded, ties to the lower id).
pub fn initial_assignment(clusters: &Clustering, hub_feats: &Tensor, k: usize) -> Result<AssignmentMatrix> {
    let n_hubs = clusters.cluster_count();
    if hub_feats.rows() != n_hubs {
        return Err(Error::Contract(format!(
            "{} hub feature rows for {n_hubs} clusters",
            hub_feats.rows()
        )));
    }
    let kk = k_eff(k, n_hubs);
    let delta = hub_distances(hub_feats);
    let rows: Vec<Vec<usize>> = (0..n_hubs)
        .map(|c| {
            let mut others: Vec<usize> = (0..n_hubs).filter(|&h| h != c).collect();
            others.sort_by(|&a, &b| delta.get(c, a).total_cmp(&delta.get(c, b)).then(a.cmp(&b)));
            std::iter::once(c).chain(others.into_iter().take(kk - 1)).collect()
        })
        .collect();
    let flat = clusters
        .cluster_of()
        .iter()
        .flat_map(|&c| rows[c].iter().copied())
        .collect();
    AssignmentMatrix::from_flat(clusters.num_nodes(), n_hubs, kk, flat)
}

/// Strides `u` in `1..n_hubs` coprime with `n_hubs` (just `[1]` for a single
/// hub).
pub fn coprime_strides(n_hubs: usize) -> Vec<usize> {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    if n_hubs <= 1 {
        return vec![1];
    }
    (1..n_hubs).filter(|&u| gcd(u, n_hubs) == 1).collect()
}

/// Spoke `i` gets hubs `perm[(i*stride + j) mod n_hubs]` for `j < k_eff`.
pub fn balanced_random_with(n_spokes: usize, perm: &[usize], stride: usize, k: usize) -> Result<AssignmentMatrix> {
    let n_hubs = perm.len();
    let kk = k_eff(k, n_hubs);
    let mut flat = Vec::with_capacity(n_spokes * kk);
    for i in 0..n_spokes {
        for j in 0..kk {
            flat.push(perm[(i * stride + j) % n_hubs]);
        }
    }
    AssignmentMatrix::from_flat(n_spokes, n_hubs, kk, flat)
}

/// Random hub permutation plus a random coprime stride; every hub ends up
/// with within `k` spokes of every other hub.
pub fn balanced_random_assignment(n_spokes: usize, n_hubs: usize, k: usize, seed: u64) -> AssignmentMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n_hubs).collect();
    perm.shuffle(&mut rng);
    let strides = coprime_strides(n_hubs);
    let stride = strides[rng.gen_range(0..strides.len())];
    balanced_random_with(n_spokes, &perm, stride, k).expect("stride construction yields distinct hubs")
}

/// Independent uniform `k_eff`-subsets per spoke.
pub fn random_assignment(n_spokes: usize, n_hubs: usize, k: usize, seed: u64) -> AssignmentMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kk = k_eff(k, n_hubs);
    let flat = (0..n_spokes)
        .flat_map(|_| index::sample(&mut rng, n_hubs, kk).into_vec())
        .collect();
    AssignmentMatrix::from_flat(n_spokes, n_hubs, kk, flat).expect("sampled without replacement")
}

/// Attention-driven reassignment.
///
/// Every hub's neighbourhood is the `k_eff` nearest hubs in `delta`
/// (itself included via the zero diagonal). Each spoke picks its connected
/// hub with the largest score (ties to the lower hub id) and is rewired to
/// that hub's neighbourhood.
pub fn reassign(
    gamma: &AttnScores,
    assignment: &AssignmentMatrix,
    delta: &HubDistances,
    k: usize,
) -> Result<AssignmentMatrix> {
    if gamma.len() != assignment.num_connections() {
        return Err(Error::Contract(format!(
            "{} scores for {} connections",
            gamma.len(),
            assignment.num_connections()
        )));
    }
    let n_hubs = assignment.n_hubs();
    if delta.n_hubs() != n_hubs {
        return Err(Error::Contract(format!(
            "distance matrix over {} hubs, assignment over {n_hubs}",
            delta.n_hubs()
        )));
    }
    let kk = k_eff(k, n_hubs);
    let neighbourhoods = (0..n_hubs)
        .map(|h| bottom_k_indices(delta.row(h), kk))
        .collect::<Result<Vec<_>>>()?;
    let ka = assignment.k();
    let mut flat = Vec::with_capacity(assignment.n_spokes() * kk);
    for i in 0..assignment.n_spokes() {
        let hubs = assignment.hubs_of(i);
        let scores = &gamma.scores()[i * ka..(i + 1) * ka];
        let mut best = 0;
        for j in 1..ka {
            if scores[j] > scores[best] || (scores[j] == scores[best] && hubs[j] < hubs[best]) {
                best = j;
            }
        }
        flat.extend_from_slice(&neighbourhoods[hubs[best]]);
    }
    AssignmentMatrix::from_flat(assignment.n_spokes(), n_hubs, kk, flat)
}

/// Applies one of the reassignment strategies. `seed` feeds the random ones.
pub fn apply_reassignment(
    strategy: ReassignStrategy,
    gamma: &AttnScores,
    assignment: &AssignmentMatrix,
    delta: &HubDistances,
    k: usize,
    seed: u64,
) -> Result<AssignmentMatrix> {
    let (ns, nh) = (assignment.n_spokes(), assignment.n_hubs());
    Ok(match strategy {
        ReassignStrategy::Attention => reassign(gamma, assignment, delta, k)?,
        ReassignStrategy::None => assignment.clone(),
        ReassignStrategy::Random => random_assignment(ns, nh, k, seed),
        ReassignStrategy::BalancedRandom => balanced_random_assignment(ns, nh, k, seed),
    })
}

/// First-layer assignment for one graph.
pub fn build_initial_assignment(
    strategy: AssignmentStrategy,
    clusters: &Clustering,
    hub_feats: &Tensor,
    k: usize,
    seed: u64,
) -> Result<AssignmentMatrix> {
    let (ns, nh) = (clusters.num_nodes(), clusters.cluster_count());
    Ok(match strategy {
        AssignmentStrategy::FeatureSimilarity => initial_assignment(clusters, hub_feats, k)?,
        AssignmentStrategy::Random => random_assignment(ns, nh, k, seed),
        AssignmentStrategy::BalancedRandom => balanced_random_assignment(ns, nh, k, seed),
    })
}
