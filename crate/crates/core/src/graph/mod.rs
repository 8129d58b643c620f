//! Undirected graphs in CSR form, batching, generators and JSON I/O.

mod batch;
mod generate;
mod io;

pub use batch::{batch, GraphBatch};
pub use generate::{
    gen_token_task, random_regular, random_regular_with_dims, token_dataset, NO_TOKEN, TOKEN,
};
pub use io::{load_graph, parse_graph, save_graph, to_json_string};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-node or per-graph targets.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Symmetric adjacency in compressed sparse row form.
///
/// Invariants: every edge is stored in both directions, there are no
/// self-loops, and each adjacency row is strictly ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphCSR {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    node_features: Tensor,
    /// One row per undirected edge, in [`GraphCSR::edges`] order.
    edge_attrs: Option<Tensor>,
    labels: Option<Labels>,
}

impl GraphCSR {
    /// Builds a graph from undirected edges, each listed once in either
    /// orientation.
    ///
    /// `edge_attrs`, when given, is aligned with `edges` and gets reordered to
    /// the canonical `(min, max)` lexicographic edge order.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        node_features: Tensor,
        edge_attrs: Option<Tensor>,
        labels: Option<Labels>,
    ) -> Result<Self> {
        if node_features.rows() != num_nodes {
            return Err(Error::InvalidParameter(format!(
                "{} feature rows for {num_nodes} nodes",
                node_features.rows()
            )));
        }
        if let Some(attrs) = &edge_attrs {
            if attrs.rows() != edges.len() {
                return Err(Error::InvalidParameter(format!(
                    "{} edge attribute rows for {} edges",
                    attrs.rows(),
                    edges.len()
                )));
            }
        }
        let mut canon: Vec<(usize, usize, usize)> = Vec::with_capacity(edges.len());
        for (i, &(u, v)) in edges.iter().enumerate() {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidParameter(format!(
                    "edge #{i} [{u}, {v}] references a node outside 0..{num_nodes}"
                )));
            }
            if u == v {
                return Err(Error::InvalidParameter(format!("edge #{i} [{u}, {v}] is a self-loop")));
            }
            canon.push((u.min(v), u.max(v), i));
        }
        canon.sort_unstable();
        for w in canon.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::InvalidParameter(format!(
                    "edge #{} [{}, {}] duplicates edge #{}",
                    w[1].2, w[1].0, w[1].1, w[0].2
                )));
            }
        }

        let mut degree = vec![0usize; num_nodes];
        for &(u, v, _) in &canon {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        row_offsets.push(0);
        for d in &degree {
            row_offsets.push(row_offsets.last().unwrap() + d);
        }
        let mut fill = row_offsets[..num_nodes].to_vec();
        let mut col_indices = vec![0; row_offsets[num_nodes]];
        for &(u, v, _) in &canon {
            col_indices[fill[u]] = v;
            fill[u] += 1;
            col_indices[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..num_nodes {
            col_indices[row_offsets[i]..row_offsets[i + 1]].sort_unstable();
        }

        let edge_attrs = edge_attrs.map(|a| {
            let order: Vec<usize> = canon.iter().map(|&(_, _, i)| i).collect();
            a.select_rows(&order)
        });

        Ok(Self {
            num_nodes,
            row_offsets,
            col_indices,
            node_features,
            edge_attrs,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[v]..self.row_offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.row_offsets[v + 1] - self.row_offsets[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, lexicographically sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn edge_attrs(&self) -> Option<&Tensor> {
        self.edge_attrs.as_ref()
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn with_labels(mut self, labels: Option<Labels>) -> Self {
        self.labels = labels;
        self
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidParameter("not a permutation of the node ids".into()));
        }
        let edges: Vec<(usize, usize)> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        let mut inv = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let features = self.node_features.select_rows(&inv);
        let labels = self.labels.as_ref().map(|l| match l {
            Labels::Class(v) if v.len() == n => Labels::Class(inv.iter().map(|&o| v[o]).collect()),
            Labels::Real(v) if v.len() == n => Labels::Real(inv.iter().map(|&o| v[o]).collect()),
            other => other.clone(),
        });
        Self::from_edges(n, &edges, features, self.edge_attrs.clone(), labels)
    }
}
