//! Message operators: sparse bipartite attention, dense hub self-attention
//! and a GCN layer for the local spoke update.
//!
//! Parameter bundles are generic over their handle type so the same layout
//! describes both stored parameters ([`ParamId`]) and parameters bound to a
//! tape ([`Var`]).

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::GraphCSR;
use crate::hubs::AssignmentMatrix;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{SegmentIndex, Tape, Tensor, Var};

/// Sparse source→destination connections; softmax groups by destination.
#[derive(Clone, Debug)]
pub struct Connections {
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    seg: Arc<SegmentIndex>,
    n_src: usize,
}

impl Connections {
    pub fn new(src: Vec<usize>, dst: Vec<usize>, n_src: usize, n_dst: usize) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(shape_err("connections", format!("{} sources, {} destinations", src.len(), dst.len())));
        }
        if let Some(&bad) = src.iter().find(|&&s| s >= n_src) {
            return Err(Error::InvalidParameter(format!("source {bad} out of {n_src}")));
        }
        let seg = SegmentIndex::new(dst.clone(), n_dst)?;
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            seg: Arc::new(seg),
            n_src,
        })
    }

    /// Spokes are sources, hubs destinations; entry order follows the
    /// assignment's connection list.
    pub fn spokes_to_hubs(a: &AssignmentMatrix) -> Self {
        Self::batched(std::slice::from_ref(a), false).expect("valid assignment")
    }

    /// Hubs are sources, spokes destinations; entry `i` is aligned with the
    /// assignment's `i`-th connection.
    pub fn hubs_to_spokes(a: &AssignmentMatrix) -> Self {
        Self::batched(std::slice::from_ref(a), true).expect("valid assignment")
    }

    /// Block-diagonal union of per-graph assignments, with spoke and hub ids
    /// offset graph by graph.
    pub fn batched(parts: &[AssignmentMatrix], hubs_are_sources: bool) -> Result<Self> {
        let (mut spokes, mut hubs) = (Vec::new(), Vec::new());
        let (mut s_off, mut h_off) = (0, 0);
        for a in parts {
            for (s, h) in a.connections() {
                spokes.push(s + s_off);
                hubs.push(h + h_off);
            }
            s_off += a.n_spokes();
            h_off += a.n_hubs();
        }
        if hubs_are_sources {
            Self::new(hubs, spokes, h_off, s_off)
        } else {
            Self::new(spokes, hubs, s_off, h_off)
        }
    }

    /// Every node attends to every node (itself included).
    pub fn full(n: usize) -> Self {
        Self::block_full(&[n])
    }

    /// Dense all-pairs connectivity inside each block of consecutive ids.
    pub fn block_full(block_sizes: &[usize]) -> Self {
        let total: usize = block_sizes.iter().sum();
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        let mut off = 0;
        for &b in block_sizes {
            for q in off..off + b {
                for s in off..off + b {
                    src.push(s);
                    dst.push(q);
                }
            }
            off += b;
        }
        Self::new(src, dst, total, total).expect("in range")
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn sources(&self) -> &[usize] {
        &self.src
    }

    pub fn destinations(&self) -> &[usize] {
        &self.dst
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn n_dst(&self) -> usize {
        self.seg.segment_count()
    }
}

/// Uniform initialization bound for hidden width `d`.
pub fn init_bound(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

fn init_param<R: Rng>(store: &mut ParamStore, name: String, rows: usize, cols: usize, bound: f64, rng: &mut R) -> ParamId {
    store.add(name, Tensor::uniform(rows, cols, -bound, bound, rng))
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear<H = Var> {
    pub weight: H,
    pub bias: H,
}

impl Linear<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            weight: init_param(store, format!("{name}.weight"), d_in, d_out, bound, rng),
            bias: init_param(store, format!("{name}.bias"), 1, d_out, bound, rng),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> Linear<Var> {
        Linear {
            weight: vars[self.weight.index()],
            bias: vars[self.bias.index()],
        }
    }
}

impl Linear<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Per-head transforms of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionHead<H = Var> {
    /// `d x d_h`, applied to sources for both scoring and messages.
    pub w_src: H,
    /// `d x d_h`, applied to destinations for scoring.
    pub w_dst: H,
    /// `d_h x 1` scoring vector.
    pub att: H,
}

#[derive(Clone, Debug)]
pub struct AttentionParams<H = Var> {
    pub heads: Vec<AttentionHead<H>>,
    /// `h*d_h x d` output mix.
    pub w_out: H,
}

impl AttentionParams<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let bound = init_bound(d);
        let heads = (0..heads)
            .map(|h| AttentionHead {
                w_src: init_param(store, format!("{name}.head{h}.w_src"), d, dh, bound, rng),
                w_dst: init_param(store, format!("{name}.head{h}.w_dst"), d, dh, bound, rng),
                att: init_param(store, format!("{name}.head{h}.att"), dh, 1, bound, rng),
            })
            .collect();
        let w_out = init_param(store, format!("{name}.w_out"), d, d, bound, rng);
        Ok(Self { heads, w_out })
    }

    pub fn bind(&self, vars: &[Var]) -> AttentionParams<Var> {
        AttentionParams {
            heads: self
                .heads
                .iter()
                .map(|h| AttentionHead {
                    w_src: vars[h.w_src.index()],
                    w_dst: vars[h.w_dst.index()],
                    att: vars[h.att.index()],
                })
                .collect(),
            w_out: vars[self.w_out.index()],
        }
    }
}

impl AttentionParams<Var> {
    /// Creates fresh differentiable parameters directly on `tape`.
    pub fn on_tape<R: Rng>(tape: &mut Tape, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let spec = AttentionParams::init(&mut store, "attn", d, heads, rng)?;
        Ok(spec.bind(&store.bind(tape)))
    }
}

/// Attention of destinations `q` over their connected sources `k`.
///
/// Per head, connection `(s, q)` scores `att . leaky(W_src k_s + W_dst q_q)`;
/// scores are softmax-normalized over each destination's sources and the
/// head output is the weighted sum of `W_src k_s`. Heads are concatenated,
/// mixed by `W_out` and added to `q`. When `want_scores` is set, the
/// head-averaged weights are returned aligned with the connection order.
pub fn bipartite_attention(
    tape: &mut Tape,
    k: Var,
    q: Var,
    conn: &Connections,
    params: &AttentionParams,
    want_scores: bool,
) -> Result<(Var, Option<Vec<f64>>)> {
    let (n_src, d) = tape.shape(k);
    let (n_dst, dq) = tape.shape(q);
    if n_src != conn.n_src() || n_dst != conn.n_dst() || d != dq {
        return Err(shape_err(
            "bipartite_attention",
            format!(
                "sources {:?}, destinations {:?}, connections {}->{}",
                tape.shape(k),
                tape.shape(q),
                conn.n_src(),
                conn.n_dst()
            ),
        ));
    }
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut score_sum = want_scores.then(|| vec![0.0; conn.len()]);
    for head in &params.heads {
        let ks = tape.matmul(k, head.w_src)?;
        let qd = tape.matmul(q, head.w_dst)?;
        let ke = tape.gather_rows(ks, conn.src.clone())?;
        let qe = tape.gather_rows(qd, conn.dst.clone())?;
        let z = tape.add(ke, qe)?;
        let z = tape.leaky_relu(z);
        let e = tape.matmul(z, head.att)?;
        let alpha = tape.segment_softmax(e, conn.seg.clone())?;
        if let Some(sum) = score_sum.as_mut() {
            for (s, a) in sum.iter_mut().zip(tape.value(alpha).data()) {
                *s += a;
            }
        }
        let msg = tape.scale_rows(ke, alpha)?;
        outs.push(tape.scatter_add_rows(msg, conn.dst.clone(), n_dst)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let mixed = tape.matmul(cat, params.w_out)?;
    let out = tape.add(q, mixed)?;
    let heads = params.heads.len() as f64;
    let scores = score_sum.map(|mut s| {
        s.iter_mut().for_each(|v| *v /= heads);
        s
    });
    Ok((out, scores))
}

/// Dense self-attention among hubs (every hub attends to all hubs).
pub fn hub_self_attention(tape: &mut Tape, hubs: Var, params: &AttentionParams) -> Result<Var> {
    let n = tape.shape(hubs).0;
    if n == 0 {
        return Err(Error::InvalidParameter("hub self-attention needs at least one hub".into()));
    }
    Ok(bipartite_attention(tape, hubs, hubs, &Connections::full(n), params, false)?.0)
}

/// Weight and bias of one GCN layer.
#[derive(Clone, Debug)]
pub struct MpnnParams<H = Var> {
    pub weight: H,
    pub bias: H,
}

impl MpnnParams<ParamId> {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let bound = init_bound(d);
        Self {
            weight: init_param(store, format!("{name}.weight"), d, d, bound, rng),
            bias: init_param(store, format!("{name}.bias"), 1, d, bound, rng),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> MpnnParams<Var> {
        MpnnParams {
            weight: vars[self.weight.index()],
            bias: vars[self.bias.index()],
        }
    }
}

/// Symmetric normalization `D^-1/2 (A + I) D^-1/2` as a weighted edge list.
#[derive(Clone, Debug)]
pub struct GcnNorm {
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    weight: Tensor,
    n: usize,
}

impl GcnNorm {
    pub fn new(g: &GraphCSR) -> Self {
        let n = g.num_nodes();
        let deg: Vec<f64> = (0..n).map(|v| (g.degree(v) + 1) as f64).collect();
        let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for v in 0..n {
            src.push(v);
            dst.push(v);
            w.push(1.0 / deg[v]);
            for &u in g.neighbors(v) {
                src.push(u);
                dst.push(v);
                w.push(1.0 / (deg[u] * deg[v]).sqrt());
            }
        }
        Self {
            src: src.into(),
            dst: dst.into(),
            weight: Tensor::column(&w),
            n,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }
}

/// `x + relu(Â x W + b)`.
pub fn gcn_layer(tape: &mut Tape, g: &GraphCSR, x: Var, params: &MpnnParams) -> Result<Var> {
    gcn_layer_with(tape, &GcnNorm::new(g), x, params)
}

pub fn gcn_layer_with(tape: &mut Tape, norm: &GcnNorm, x: Var, params: &MpnnParams) -> Result<Var> {
    if tape.shape(x).0 != norm.n {
        return Err(shape_err("gcn_layer", format!("{} rows for {} nodes", tape.shape(x).0, norm.n)));
    }
    let xw = tape.matmul(x, params.weight)?;
    let msg = tape.gather_rows(xw, norm.src.clone())?;
    let w = tape.constant(norm.weight.clone());
    let msg = tape.scale_rows(msg, w)?;
    let agg = tape.scatter_add_rows(msg, norm.dst.clone(), norm.n)?;
    let pre = tape.add_row(agg, params.bias)?;
    let act = tape.relu(pre);
    tape.add(x, act)
}
