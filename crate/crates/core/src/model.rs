//! The full network: input encoder, hub initialization, `L` spoke update
//! layers and a prediction head, plus the training loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    bipartite_attention, gcn_layer_with, init_bound, AttentionParams, Connections, GcnNorm, Linear, MpnnParams,
};
use crate::error::{shape_err, Error, Result};
use crate::graph::{GraphBatch, Labels};
use crate::hubs::{
    apply_reassignment, build_initial_assignment, hub_distances, k_eff, num_hubs, AssignmentMatrix,
    AssignmentStrategy, AttnScores, HubInit, ReassignStrategy,
};
use crate::metrics::{hub_utilization, UtilizationReport};
use crate::names::named_enum;
use crate::params::{ParamId, ParamStore};
use crate::partition::{cluster, ClusterStrategy, Clustering};
use crate::tensor::{SegmentIndex, Tape, Tensor, Var};

named_enum! {
    pub enum Arch {
        Rehub => "rehub",
        /// Stacked GCN layers only; no hubs at all.
        GcnBaseline => "gcn_baseline",
        /// GCN plus full spoke-to-spoke dot-product attention. Quadratic;
        /// only meant for memory comparisons.
        DenseReference => "dense_reference",
    }
}

named_enum! {
    pub enum HeadKind {
        NodeClass => "node_class",
        GraphClass => "graph_class",
        GraphReg => "graph_reg",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hubs per graph are `round(hub_ratio * sqrt(N_s))`.
    pub hub_ratio: f64,
    /// Fixed hub count per graph instead of the ratio rule (capped at `N_s`).
    pub static_hubs: Option<usize>,
    /// Hubs per spoke.
    pub k: usize,
    pub spoke_encoder: bool,
    pub hub_init: HubInit,
    pub clustering: ClusterStrategy,
    pub assignment: AssignmentStrategy,
    pub reassignment: ReassignStrategy,
    /// Connect every spoke to every hub.
    pub fc_mode: bool,
    pub head: HeadKind,
    /// Number of classes, or target width for regression.
    pub out_dim: usize,
    pub layernorm: bool,
    /// Seeds parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Rehub,
            input_dim: 2,
            hidden_dim: 64,
            heads: 4,
            layers: 2,
            hub_ratio: 1.0,
            static_hubs: None,
            k: 3,
            spoke_encoder: false,
            hub_init: HubInit::ClusterMean,
            clustering: ClusterStrategy::BfsBalanced,
            assignment: AssignmentStrategy::FeatureSimilarity,
            reassignment: ReassignStrategy::Attention,
            fc_mode: false,
            head: HeadKind::NodeClass,
            out_dim: 2,
            layernorm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return fail("input_dim, hidden_dim and out_dim must be positive".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if !(self.hub_ratio > 0.0 && self.hub_ratio.is_finite()) {
            return fail(format!("hub_ratio must be positive, got {}", self.hub_ratio));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.static_hubs == Some(0) {
            return fail("static_hubs must be at least 1".into());
        }
        if self.hub_init == HubInit::Learned && self.static_hubs.is_none() {
            return fail("hub_init = learned needs static_hubs".into());
        }
        Ok(())
    }

    /// Hub count for a graph with `n_spokes` nodes.
    pub fn hubs_for(&self, n_spokes: usize) -> usize {
        match self.static_hubs {
            Some(s) => s.min(n_spokes).max(1),
            None => num_hubs(n_spokes, self.hub_ratio),
        }
    }

    /// Hubs per spoke actually used for a graph with `n_hubs` hubs.
    pub fn k_for(&self, n_hubs: usize) -> usize {
        if self.fc_mode {
            n_hubs
        } else {
            k_eff(self.k, n_hubs)
        }
    }
}

/// Parameters of one spoke update layer.
#[derive(Clone, Debug)]
pub struct LayerParams<H = Var> {
    pub mpnn: MpnnParams<H>,
    /// Spokes→hubs for `rehub`; the dense spoke attention for
    /// `dense_reference`.
    pub to_hubs: Option<AttentionParams<H>>,
    pub hub_self: Option<AttentionParams<H>>,
    pub to_spokes: Option<AttentionParams<H>>,
}

/// Where each parameter lives, generic over the handle type.
#[derive(Clone, Debug)]
pub struct Layout<H = Var> {
    pub input: Linear<H>,
    pub spoke_encoder: Option<Linear<H>>,
    /// Learned hub features, `static_hubs x d`.
    pub hub_matrix: Option<H>,
    pub layers: Vec<LayerParams<H>>,
    pub head_hidden: Linear<H>,
    pub head_out: Linear<H>,
}

impl Layout<ParamId> {
    fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.hidden_dim;
        let bound = init_bound(d);
        let input = Linear::init(store, "input", cfg.input_dim, d, bound, rng);
        let rehub = cfg.arch == Arch::Rehub;
        let spoke_encoder = (rehub && cfg.spoke_encoder).then(|| Linear::init(store, "spoke_encoder", d, d, bound, rng));
        let hub_matrix = match (rehub, cfg.hub_init, cfg.static_hubs) {
            (true, HubInit::Learned, Some(s)) => Some(store.add("hub_matrix", Tensor::uniform(s, d, -bound, bound, rng))),
            _ => None,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("layer{l}");
            let mpnn = MpnnParams::init(store, &format!("{name}.mpnn"), d, rng);
            let (to_hubs, hub_self, to_spokes) = match cfg.arch {
                Arch::Rehub => (
                    Some(AttentionParams::init(store, &format!("{name}.to_hubs"), d, cfg.heads, rng)?),
                    Some(AttentionParams::init(store, &format!("{name}.hub_self"), d, cfg.heads, rng)?),
                    Some(AttentionParams::init(store, &format!("{name}.to_spokes"), d, cfg.heads, rng)?),
                ),
                Arch::DenseReference => (
                    Some(AttentionParams::init(store, &format!("{name}.dense"), d, cfg.heads, rng)?),
                    None,
                    None,
                ),
                Arch::GcnBaseline => (None, None, None),
            };
            layers.push(LayerParams {
                mpnn,
                to_hubs,
                hub_self,
                to_spokes,
            });
        }
        let head_hidden = Linear::init(store, "head.hidden", d, d, bound, rng);
        let head_out = Linear::init(store, "head.out", d, cfg.out_dim, bound, rng);
        Ok(Self {
            input,
            spoke_encoder,
            hub_matrix,
            layers,
            head_hidden,
            head_out,
        })
    }

    /// Resolves every handle against `vars`, indexed like the store.
    pub fn bind(&self, vars: &[Var]) -> Layout<Var> {
        let attn = |a: &Option<AttentionParams<ParamId>>| a.as_ref().map(|a| a.bind(vars));
        Layout {
            input: self.input.bind(vars),
            spoke_encoder: self.spoke_encoder.as_ref().map(|l| l.bind(vars)),
            hub_matrix: self.hub_matrix.map(|p| vars[p.index()]),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    mpnn: l.mpnn.bind(vars),
                    to_hubs: attn(&l.to_hubs),
                    hub_self: attn(&l.hub_self),
                    to_spokes: attn(&l.to_spokes),
                })
                .collect(),
            head_hidden: self.head_hidden.bind(vars),
            head_out: self.head_out.bind(vars),
        }
    }
}

/// Configuration plus parameter values.
#[derive(Clone, Debug)]
pub struct ModelState {
    cfg: ModelConfig,
    store: ParamStore,
    layout: Layout<ParamId>,
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub layout: Layout<Var>,
}

impl ModelState {
    /// Fresh parameters, uniform in `[-1/sqrt(d), 1/sqrt(d)]`, seeded by
    /// `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let layout = Layout::init(&mut store, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            layout,
        })
    }

    /// Rebuilds a state from stored tensors, checking names and shapes.
    pub fn from_parts(cfg: &ModelConfig, names: &[String], values: Vec<Tensor>) -> Result<Self> {
        let mut state = Self::new(cfg)?;
        if names.len() != state.store.len() || values.len() != names.len() {
            return Err(Error::Parse(format!(
                "expected {} parameter tensors, found {}",
                state.store.len(),
                values.len()
            )));
        }
        for (i, (name, value)) in names.iter().zip(values).enumerate() {
            let expected = &state.store.names()[i];
            let shape = state.store.values()[i].shape();
            if name != expected || value.shape() != shape {
                return Err(Error::Parse(format!(
                    "parameter {i}: expected {expected} {shape:?}, found {name} {:?}",
                    value.shape()
                )));
            }
            state.store.values_mut()[i] = value;
        }
        Ok(state)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout<ParamId> {
        &self.layout
    }

    /// Registers all parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars = self.store.bind(tape);
        let layout = self.layout.bind(&vars);
        BoundModel { vars, layout }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        model: &BoundModel,
        input: &PreparedBatch,
        routing: Option<&[Vec<AssignmentMatrix>]>,
    ) -> Result<Forward> {
        forward(tape, &model.layout, &self.cfg, input, routing)
    }
}

/// Training targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Arc<[usize]>),
    Values(Tensor),
}

impl Targets {
    /// Node labels for `node_class`; for graph heads, the first label of each
    /// graph (classification) or its first `out_dim` values (regression).
    pub fn from_batch(b: &GraphBatch, head: HeadKind, out_dim: usize) -> Result<Self> {
        let missing = || Error::InvalidParameter("batch has no labels".into());
        match head {
            HeadKind::NodeClass => match b.merged().labels().ok_or_else(missing)? {
                Labels::Class(v) if v.len() == b.num_nodes() => Ok(Targets::Classes(v.clone().into())),
                _ => Err(Error::InvalidParameter("node_class needs one class label per node".into())),
            },
            HeadKind::GraphClass => {
                let mut out = Vec::with_capacity(b.num_graphs());
                for g in b.graphs() {
                    match g.labels().ok_or_else(missing)? {
                        Labels::Class(v) if !v.is_empty() => out.push(v[0]),
                        _ => return Err(Error::InvalidParameter("graph_class needs class labels".into())),
                    }
                }
                Ok(Targets::Classes(out.into()))
            }
            HeadKind::GraphReg => {
                let mut out = Vec::with_capacity(b.num_graphs() * out_dim);
                for g in b.graphs() {
                    let vals: Vec<f64> = match g.labels().ok_or_else(missing)? {
                        Labels::Real(v) => v.clone(),
                        Labels::Class(v) => v.iter().map(|&c| c as f64).collect(),
                    };
                    if vals.len() < out_dim {
                        return Err(shape_err("targets", format!("{} values, out_dim {out_dim}", vals.len())));
                    }
                    out.extend_from_slice(&vals[..out_dim]);
                }
                Ok(Targets::Values(Tensor::new(b.num_graphs(), out_dim, out)?))
            }
        }
    }
}

/// A batch with everything that does not depend on parameters precomputed:
/// GCN normalization, one clustering per graph and the targets.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    batch: GraphBatch,
    norm: GcnNorm,
    clusterings: Vec<Clustering>,
    graph_seg: Arc<SegmentIndex>,
    targets: Option<Targets>,
    seed: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PreparedBatch {
    /// Clusters every graph with `cfg.clustering`; graph `g` uses a seed
    /// derived from `seed` and `g`.
    pub fn new(batch: GraphBatch, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let clusterings = if cfg.arch == Arch::Rehub {
            batch
                .graphs()
                .iter()
                .enumerate()
                .map(|(gi, g)| cluster(g, cfg.hubs_for(g.num_nodes()), cfg.clustering, mix(seed, gi as u64, 0)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Self::with_clusterings(batch, cfg, clusterings, seed)
    }

    /// Uses the given clusterings instead of computing them.
    pub fn with_clusterings(batch: GraphBatch, cfg: &ModelConfig, clusterings: Vec<Clustering>, seed: u64) -> Result<Self> {
        if batch.graphs().iter().any(|g| g.num_nodes() == 0) {
            return Err(Error::InvalidParameter("every graph needs at least one node".into()));
        }
        if cfg.arch == Arch::Rehub {
            if clusterings.len() != batch.num_graphs() {
                return Err(Error::Contract(format!(
                    "{} clusterings for {} graphs",
                    clusterings.len(),
                    batch.num_graphs()
                )));
            }
            for (gi, (c, g)) in clusterings.iter().zip(batch.graphs()).enumerate() {
                if c.num_nodes() != g.num_nodes() || c.cluster_count() != cfg.hubs_for(g.num_nodes()) {
                    return Err(Error::Contract(format!("clustering of graph {gi} does not match its size")));
                }
            }
        }
        let targets = batch
            .merged()
            .labels()
            .map(|_| Targets::from_batch(&batch, cfg.head, cfg.out_dim))
            .transpose()?;
        let norm = GcnNorm::new(batch.merged());
        let graph_seg = Arc::new(SegmentIndex::new(batch.graph_index().to_vec(), batch.num_graphs())?);
        Ok(Self {
            batch,
            norm,
            clusterings,
            graph_seg,
            targets,
            seed,
        })
    }

    pub fn batch(&self) -> &GraphBatch {
        &self.batch
    }

    pub fn clusterings(&self) -> &[Clustering] {
        &self.clusterings
    }

    pub fn targets(&self) -> Option<&Targets> {
        self.targets.as_ref()
    }
}

/// What one layer did, per graph.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Assignment used by this layer's spoke↔hub steps.
    pub assignments: Vec<AssignmentMatrix>,
    /// Hub→spoke attention weights, aligned with `assignments`.
    pub scores: Vec<AttnScores>,
    /// Hub features after the hub self-attention step, all graphs stacked.
    pub hub_features: Tensor,
    /// Connections in the spokes→hubs, hub self-attention and hubs→spokes
    /// steps together.
    pub connections: usize,
}

impl LayerTrace {
    pub fn utilization(&self) -> Vec<(usize, f64)> {
        self.assignments.iter().map(hub_utilization).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub hub_counts: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    pub fn utilization_report(&self) -> UtilizationReport {
        let per_layer: Vec<Vec<&AssignmentMatrix>> =
            self.layers.iter().map(|l| l.assignments.iter().collect()).collect();
        UtilizationReport::from_assignments(&per_layer)
    }

    /// Per-layer assignments, in the shape accepted as fixed routing.
    pub fn routing(&self) -> Vec<Vec<AssignmentMatrix>> {
        self.layers.iter().map(|l| l.assignments.clone()).collect()
    }
}

pub struct Forward {
    pub predictions: Var,
    pub trace: Trace,
}

fn maybe_norm(tape: &mut Tape, x: Var, on: bool) -> Var {
    if on {
        tape.layer_norm(x)
    } else {
        x
    }
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(counts.len() + 1);
    out.push(0);
    for c in counts {
        out.push(out.last().unwrap() + c);
    }
    out
}

/// Runs the network on a prepared batch.
///
/// With `routing`, layer `l` uses `routing[l]` (one assignment per graph)
/// instead of deriving its assignment; reassignment then never runs. This
/// holds the discrete routing fixed, e.g. for finite-difference checks.
pub fn forward(
    tape: &mut Tape,
    params: &Layout<Var>,
    cfg: &ModelConfig,
    input: &PreparedBatch,
    routing: Option<&[Vec<AssignmentMatrix>]>,
) -> Result<Forward> {
    let b = &input.batch;
    if b.merged().feature_dim() != cfg.input_dim {
        return Err(shape_err(
            "forward",
            format!("features have {} columns, model expects {}", b.merged().feature_dim(), cfg.input_dim),
        ));
    }
    if let Some(r) = routing {
        if r.len() != cfg.layers || r.iter().any(|l| l.len() != b.num_graphs()) {
            return Err(Error::Contract("routing must hold one assignment per layer and graph".into()));
        }
    }
    let x0 = tape.constant(b.merged().node_features().clone());
    let mut x = params.input.apply(tape, x0)?;
    let mut trace = Trace::default();

    match cfg.arch {
        Arch::GcnBaseline => {
            for layer in &params.layers {
                x = gcn_layer_with(tape, &input.norm, x, &layer.mpnn)?;
                x = maybe_norm(tape, x, cfg.layernorm);
            }
        }
        Arch::DenseReference => {
            for layer in &params.layers {
                x = gcn_layer_with(tape, &input.norm, x, &layer.mpnn)?;
                x = maybe_norm(tape, x, cfg.layernorm);
                let attn = layer.to_hubs.as_ref().expect("dense layer has attention");
                x = dense_attention_blocks(tape, x, b.offsets(), attn)?;
                x = maybe_norm(tape, x, cfg.layernorm);
            }
        }
        Arch::Rehub => {
            x = rehub_layers(tape, params, cfg, input, routing, x, &mut trace)?;
        }
    }

    let predictions = match cfg.head {
        HeadKind::NodeClass => head(tape, params, x)?,
        HeadKind::GraphClass | HeadKind::GraphReg => {
            let pooled = tape.segment_mean(x, input.graph_seg.clone())?;
            head(tape, params, pooled)?
        }
    };
    Ok(Forward { predictions, trace })
}

fn head(tape: &mut Tape, params: &Layout<Var>, x: Var) -> Result<Var> {
    let h = params.head_hidden.apply(tape, x)?;
    let h = tape.relu(h);
    params.head_out.apply(tape, h)
}

fn rehub_layers(
    tape: &mut Tape,
    params: &Layout<Var>,
    cfg: &ModelConfig,
    input: &PreparedBatch,
    routing: Option<&[Vec<AssignmentMatrix>]>,
    mut x: Var,
    trace: &mut Trace,
) -> Result<Var> {
    let b = &input.batch;
    let hub_counts: Vec<usize> = input.clusterings.iter().map(Clustering::cluster_count).collect();
    let hub_off = offsets(&hub_counts);
    let total_hubs = *hub_off.last().unwrap();

    // Hub features from this batch's spokes, one block per graph.
    let mut h = match cfg.hub_init {
        HubInit::ClusterMean => {
            let src = match &params.spoke_encoder {
                Some(enc) => {
                    let e = enc.apply(tape, x)?;
                    tape.relu(e)
                }
                None => x,
            };
            let mut seg = Vec::with_capacity(b.num_nodes());
            for (gi, c) in input.clusterings.iter().enumerate() {
                seg.extend(c.cluster_of().iter().map(|&k| k + hub_off[gi]));
            }
            tape.segment_mean(src, Arc::new(SegmentIndex::new(seg, total_hubs)?))?
        }
        HubInit::Learned => {
            let p = params.hub_matrix.ok_or_else(|| Error::Config("learned hubs need a hub matrix".into()))?;
            let idx: Vec<usize> = hub_counts.iter().flat_map(|&n| 0..n).collect();
            tape.gather_rows(p, idx.into())?
        }
    };

    let mut assignments = match routing {
        Some(r) => r[0].clone(),
        None => {
            let hv = tape.value(h);
            input
                .clusterings
                .iter()
                .enumerate()
                .map(|(gi, c)| {
                    let rows: Vec<usize> = (hub_off[gi]..hub_off[gi + 1]).collect();
                    build_initial_assignment(
                        cfg.assignment,
                        c,
                        &hv.select_rows(&rows),
                        cfg.k_for(hub_counts[gi]),
                        mix(input.seed, gi as u64, 1),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let hub_self_conn = Connections::block_full(&hub_counts);
    for (l, layer) in params.layers.iter().enumerate() {
        let to_hubs = layer.to_hubs.as_ref().expect("rehub layer");
        let hub_self = layer.hub_self.as_ref().expect("rehub layer");
        let to_spokes = layer.to_spokes.as_ref().expect("rehub layer");

        // (1) local message passing
        x = gcn_layer_with(tape, &input.norm, x, &layer.mpnn)?;
        x = maybe_norm(tape, x, cfg.layernorm);
        // (2) spokes -> hubs
        let s2h = Connections::batched(&assignments, false)?;
        h = bipartite_attention(tape, x, h, &s2h, to_hubs, false)?.0;
        h = maybe_norm(tape, h, cfg.layernorm);
        // (3) hubs -> hubs
        h = bipartite_attention(tape, h, h, &hub_self_conn, hub_self, false)?.0;
        h = maybe_norm(tape, h, cfg.layernorm);
        // (4) hubs -> spokes
        let h2s = Connections::batched(&assignments, true)?;
        let (xs, gamma) = bipartite_attention(tape, h, x, &h2s, to_spokes, true)?;
        x = maybe_norm(tape, xs, cfg.layernorm);

        let gamma = gamma.expect("scores requested");
        let mut scores = Vec::with_capacity(assignments.len());
        let mut at = 0;
        for a in &assignments {
            let n = a.num_connections();
            scores.push(AttnScores::new(gamma[at..at + n].to_vec(), cfg.heads, a)?);
            at += n;
        }
        let hub_features = tape.value(h).clone();

        // (5) reassignment for the next layer
        let next = if l + 1 == cfg.layers {
            None
        } else if let Some(r) = routing {
            Some(r[l + 1].clone())
        } else if cfg.fc_mode {
            Some(assignments.clone())
        } else {
            let mut out = Vec::with_capacity(assignments.len());
            for (gi, (a, g)) in assignments.iter().zip(&scores).enumerate() {
                let rows: Vec<usize> = (hub_off[gi]..hub_off[gi + 1]).collect();
                let delta = hub_distances(&hub_features.select_rows(&rows));
                out.push(apply_reassignment(
                    cfg.reassignment,
                    g,
                    a,
                    &delta,
                    cfg.k_for(hub_counts[gi]),
                    mix(input.seed, gi as u64, 2 + l as u64),
                )?);
            }
            Some(out)
        };

        let connections = s2h.len() + hub_self_conn.len() + h2s.len();
        trace.layers.push(LayerTrace {
            assignments: std::mem::take(&mut assignments),
            scores,
            hub_features,
            connections,
        });
        if let Some(n) = next {
            assignments = n;
        }
    }
    trace.hub_counts = hub_counts;
    Ok(x)
}

/// Dot-product attention among all nodes of each graph block.
fn dense_attention_blocks(tape: &mut Tape, x: Var, offsets: &[usize], params: &AttentionParams) -> Result<Var> {
    let mut outs = Vec::with_capacity(offsets.len().saturating_sub(1));
    for w in offsets.windows(2) {
        let xb = if offsets.len() == 2 {
            x
        } else {
            let rows: Vec<usize> = (w[0]..w[1]).collect();
            tape.gather_rows(x, rows.into())?
        };
        outs.push(dense_attention(tape, xb, params)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_rows(&outs)
    }
}

fn dense_attention(tape: &mut Tape, x: Var, params: &AttentionParams) -> Result<Var> {
    let mut heads = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let k = tape.matmul(x, head.w_src)?;
        let q = tape.matmul(x, head.w_dst)?;
        let dh = tape.shape(k).1;
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.row_softmax(s);
        heads.push(tape.matmul(a, k)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let mixed = tape.matmul(cat, params.w_out)?;
    tape.add(x, mixed)
}

/// Mean cross-entropy for classification targets, mean squared error for
/// regression targets.
pub fn loss(tape: &mut Tape, predictions: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Classes(c) => tape.softmax_cross_entropy(predictions, c.clone()),
        Targets::Values(t) => tape.squared_error(predictions, t.clone()),
    }
}

/// Fraction of rows whose argmax matches the class target.
pub fn accuracy(predictions: &Tensor, classes: &[usize]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    let correct = classes
        .iter()
        .enumerate()
        .filter(|&(i, &c)| {
            let row = predictions.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == c
        })
        .count();
    correct as f64 / classes.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shuffles the batch order each pass over the data.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= c.lr * (update + c.weight_decay * *w);
            }
        }
    }
}

/// Loss and gradients of one batch.
pub fn loss_and_grads(state: &ModelState, input: &PreparedBatch) -> Result<(f64, Vec<Tensor>)> {
    let targets = input
        .targets()
        .ok_or_else(|| Error::InvalidParameter("training batch has no labels".into()))?;
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let out = state.forward(&mut tape, &bound, input, None)?;
    let l = loss(&mut tape, out.predictions, targets)?;
    let value = tape.value(l).item();
    let grads = tape.backward(l)?;
    let g = bound
        .vars
        .iter()
        .zip(state.params().values())
        .map(|(&v, t)| grads.get_or_zeros(v, t.rows(), t.cols()))
        .collect();
    Ok((value, g))
}

/// Trains for `tcfg.steps` Adam steps, one batch per step, visiting the
/// batches in a freshly shuffled order on every pass. Returns the per-step
/// loss (measured before each update).
pub fn train(state: &mut ModelState, data: &[PreparedBatch], tcfg: &TrainConfig) -> Result<Vec<f64>> {
    train_with(state, data, tcfg, |_, _| {})
}

/// [`train`] with a callback after every step, given the step index and loss.
pub fn train_with(
    state: &mut ModelState,
    data: &[PreparedBatch],
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("no training batches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Adam::new(tcfg, state.params());
    let mut log = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        if step % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let (value, grads) = loss_and_grads(state, &data[order[step % data.len()]])?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        opt.step(state.params_mut(), &grads);
        log.push(value);
        on_step(step, value);
    }
    Ok(log)
}

/// Predictions and trace without recording gradients.
pub fn predict(state: &ModelState, input: &PreparedBatch) -> Result<(Tensor, Trace)> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let out = state.forward(&mut tape, &bound, input, None)?;
    Ok((tape.value(out.predictions).clone(), out.trace))
}
