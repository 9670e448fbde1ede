//! Per-relation LightGCN propagation and multi-relation aggregation.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::MultiplexBipartiteGraph;
use crate::sparse::Csr;

/// `D^{-1/2} A_r D^{-1/2}` for one relation, i.e. each edge weighted by
/// `1 / sqrt(|N_u| |N_v|)`.
pub fn normalized_adjacency(graph: &MultiplexBipartiteGraph, relation: usize) -> Csr {
    let adj = graph.adjacency(relation);
    let deg: Vec<f64> = (0..adj.n()).map(|k| adj.row_len(k) as f64).collect();
    let values = adj
        .triplets()
        .map(|(r, c, _)| 1.0 / (deg[r] * deg[c]).sqrt())
        .collect();
    adj.with_values(values)
}

/// `sum_{l=0..=L} A^l base` for a symmetric normalized adjacency.
///
/// The same routine is its own adjoint: the gradient on `base` is
/// `propagate_summed(adj, upstream, layers)`.
pub fn propagate_summed(adj: &Csr, base: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut acc = base.clone();
    let mut h = base.clone();
    for _ in 0..layers {
        h = adj.spmm(&h);
        acc += &h;
    }
    acc
}

/// Relation-specific embeddings: every layer from 0 to `layers` summed.
/// Nodes without neighbors under `relation` keep their base row.
pub fn lightgcn_propagate(
    graph: &MultiplexBipartiteGraph,
    relation: usize,
    base: &Array2<f64>,
    layers: usize,
) -> Array2<f64> {
    assert!(layers >= 1, "at least one layer");
    propagate_summed(&normalized_adjacency(graph, relation), base, layers)
}

/// Elementwise sum over relations.
pub fn aggregate_relations(tables: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Shape("no relation tables to aggregate".into()))?;
    let mut acc = first.clone();
    for t in &tables[1..] {
        if t.dim() != acc.dim() {
            return Err(Error::Shape(format!("{:?} vs {:?}", t.dim(), acc.dim())));
        }
        acc += t;
    }
    Ok(acc)
}
