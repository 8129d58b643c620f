use super::{GraphCSR, Labels};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Disjoint union of several graphs. Graph `g` owns the contiguous node block
/// `offsets[g]..offsets[g + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    merged: GraphCSR,
    graph_index: Vec<usize>,
    offsets: Vec<usize>,
    parts: Vec<GraphCSR>,
}

impl GraphBatch {
    pub fn merged(&self) -> &GraphCSR {
        &self.merged
    }

    pub fn graph_index(&self) -> &[usize] {
        &self.graph_index
    }

    pub fn num_graphs(&self) -> usize {
        self.parts.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.merged.num_nodes()
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Node id ranges, one past the end included: length `num_graphs + 1`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// The `g`-th input graph with its local node ids.
    pub fn graph(&self, g: usize) -> &GraphCSR {
        &self.parts[g]
    }

    pub fn graphs(&self) -> &[GraphCSR] {
        &self.parts
    }
}

/// Disjoint union with node-id offsets. Labels are concatenated when every
/// graph carries labels of the same kind, and dropped otherwise.
pub fn batch(graphs: &[GraphCSR]) -> Result<GraphBatch> {
    let dim = graphs.first().map_or(0, GraphCSR::feature_dim);
    if let Some((i, g)) = graphs.iter().enumerate().find(|(_, g)| g.feature_dim() != dim) {
        return Err(shape_err(
            "batch",
            format!("graph {i} has feature dim {}, expected {dim}", g.feature_dim()),
        ));
    }
    let edge_dim = graphs
        .first()
        .and_then(|g| g.edge_attrs().map(Tensor::cols));
    let keep_edge_attrs =
        edge_dim.is_some() && graphs.iter().all(|g| g.edge_attrs().map(Tensor::cols) == edge_dim);

    let total: usize = graphs.iter().map(GraphCSR::num_nodes).sum();
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    offsets.push(0);
    let mut graph_index = Vec::with_capacity(total);
    let mut edges = Vec::new();
    let mut features = Vec::with_capacity(total * dim);
    let mut attrs = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        let base = *offsets.last().unwrap();
        graph_index.extend(std::iter::repeat_n(gi, g.num_nodes()));
        edges.extend(g.edges().map(|(u, v)| (u + base, v + base)));
        features.extend_from_slice(g.node_features().data());
        if keep_edge_attrs {
            attrs.extend_from_slice(g.edge_attrs().unwrap().data());
        }
        offsets.push(base + g.num_nodes());
    }

    let labels = merge_labels(graphs);
    let edge_attrs = if keep_edge_attrs {
        Some(Tensor::new(edges.len(), edge_dim.unwrap(), attrs)?)
    } else {
        None
    };
    let merged = GraphCSR::from_edges(
        total,
        &edges,
        Tensor::new(total, dim, features)?,
        edge_attrs,
        labels,
    )?;
    Ok(GraphBatch {
        merged,
        graph_index,
        offsets,
        parts: graphs.to_vec(),
    })
}

fn merge_labels(graphs: &[GraphCSR]) -> Option<Labels> {
    let first = graphs.first()?.labels()?;
    match first {
        Labels::Class(_) => {
            let mut out = Vec::new();
            for g in graphs {
                match g.labels()? {
                    Labels::Class(v) => out.extend_from_slice(v),
                    Labels::Real(_) => return None,
                }
            }
            Some(Labels::Class(out))
        }
        Labels::Real(_) => {
            let mut out = Vec::new();
            for g in graphs {
                match g.labels()? {
                    Labels::Real(v) => out.extend_from_slice(v),
                    Labels::Class(_) => return None,
                }
            }
            Some(Labels::Real(out))
        }
    }
}
