use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Number;

use super::{GraphCSR, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_attrs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Number>>,
}

fn rows_to_tensor(what: &str, rows: &[Vec<f64>], expected_rows: usize) -> Result<Tensor> {
    if rows.len() != expected_rows {
        return Err(Error::Parse(format!(
            "`{what}` has {} rows, expected {expected_rows}",
            rows.len()
        )));
    }
    Tensor::from_rows(rows).map_err(|e| Error::Parse(format!("`{what}`: {e}")))
}

fn parse_labels(raw: Vec<Number>) -> Result<Labels> {
    if raw.iter().all(|n| n.is_u64()) {
        let v = raw.iter().map(|n| n.as_u64().unwrap() as usize).collect();
        return Ok(Labels::Class(v));
    }
    raw.iter()
        .enumerate()
        .map(|(i, n)| {
            n.as_f64()
                .ok_or_else(|| Error::Parse(format!("label #{i} ({n}) is not a number")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Labels::Real)
}

/// Parses the graph JSON schema. Edges are symmetrized and adjacency rows
/// sorted; self-loops and repeated edges are rejected.
pub fn parse_graph(text: &str) -> Result<GraphCSR> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let n = file.num_nodes;
    let features = rows_to_tensor("node_features", &file.node_features, n)?;
    let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
    let attrs = file
        .edge_attrs
        .as_deref()
        .map(|a| rows_to_tensor("edge_attrs", a, edges.len()))
        .transpose()?;
    let labels = file.labels.map(parse_labels).transpose()?;
    GraphCSR::from_edges(n, &edges, features, attrs, labels).map_err(|e| match e {
        Error::InvalidParameter(msg) => Error::Parse(msg),
        other => other,
    })
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<GraphCSR> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes with each undirected edge listed once as `[u, v]`, `u < v`.
pub fn to_json_string(g: &GraphCSR) -> Result<String> {
    let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    let labels = match g.labels() {
        None => None,
        Some(Labels::Class(v)) => Some(v.iter().map(|&x| Number::from(x as u64)).collect()),
        Some(Labels::Real(v)) => Some(
            v.iter()
                .map(|&x| {
                    Number::from_f64(x)
                        .ok_or_else(|| Error::InvalidParameter(format!("label {x} is not finite")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let file = GraphFile {
        num_nodes: g.num_nodes(),
        edges: g.edges().map(|(u, v)| [u, v]).collect(),
        node_features: rows(g.node_features()),
        edge_attrs: g.edge_attrs().map(rows),
        labels,
    };
    serde_json::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
}

pub fn save_graph(g: &GraphCSR, path: impl AsRef<Path>) -> Result<()> {
    let mut text = to_json_string(g)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
