//! Basic behavior patterns and the explicit pattern channel.
//!
//! A pattern is the *exact* set of relations present between a user and an
//! item, so the nonzero masks partition every interacting pair. The local
//! channel propagates over a softmax-weighted sum of pattern matrices, the
//! global channel over a similarity built from per-node pattern counts.

use std::collections::HashMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiplexBipartiteGraph, RelationSchema};
use crate::math::{sigmoid, softmax, softmax_backward, softplus, softplus_inverse};
use crate::sparse::Csr;

/// Bit `r` set iff relation `r` (schema index) is part of the pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatternMask(u32);

impl PatternMask {
    pub fn new(bits: u32, num_relations: usize) -> Result<Self> {
        if bits == 0 || bits >= (1u32 << num_relations) {
            return Err(Error::Schema(format!(
                "mask {bits:#b} invalid for {num_relations} relations"
            )));
        }
        Ok(PatternMask(bits))
    }

    pub fn from_relations(relations: &[usize]) -> Self {
        let bits = relations.iter().fold(0u32, |acc, &r| acc | (1 << r));
        assert!(bits != 0, "empty pattern");
        PatternMask(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, relation: usize) -> bool {
        self.0 & (1 << relation) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn relations(self) -> Vec<usize> {
        (0..32).filter(|&r| self.contains(r)).collect()
    }

    /// Zero-based position in [`enumerate_patterns`] order.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    /// `view&buy` style label in schema order.
    pub fn label(self, schema: &RelationSchema) -> String {
        self.relations()
            .into_iter()
            .map(|r| schema.name(r))
            .collect::<Vec<_>>()
            .join("&")
    }

    /// One character per relation, schema order, e.g. `101`.
    pub fn bit_string(self, num_relations: usize) -> String {
        (0..num_relations)
            .map(|r| if self.contains(r) { '1' } else { '0' })
            .collect()
    }
}

/// All `2^|R| - 1` nonzero masks in binary counting order.
pub fn enumerate_patterns(schema: &RelationSchema) -> Vec<PatternMask> {
    (1u32..(1u32 << schema.len())).map(PatternMask).collect()
}

/// Exact relation set of one user-item pair as a raw bitset (0 if no edge).
pub fn pair_mask(graph: &MultiplexBipartiteGraph, user: usize, item: usize) -> u32 {
    (0..graph.schema().len())
        .filter(|&r| graph.has_edge(r, user, item))
        .fold(0, |acc, r| acc | (1 << r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPatternMatrix {
    pub mask: PatternMask,
    /// Sorted `(user, item)` pairs whose exact relation set equals `mask`.
    pub edges: Vec<(usize, usize)>,
    /// Symmetric binary `N x N` matrix over those pairs.
    pub matrix: Csr,
}

impl BehaviorPatternMatrix {
    fn from_edges(graph: &MultiplexBipartiteGraph, mask: PatternMask, edges: Vec<(usize, usize)>) -> Self {
        let matrix = Csr::symmetric_binary(
            graph.num_nodes(),
            edges.iter().map(|&(u, i)| (u, graph.item_node(i))),
        );
        BehaviorPatternMatrix { mask, edges, matrix }
    }
}

/// Edges present in every relation of `mask` and absent from every other
/// relation, by sorted-list intersection and difference.
pub fn build_bbp_matrix(graph: &MultiplexBipartiteGraph, mask: PatternMask) -> BehaviorPatternMatrix {
    let num_relations = graph.schema().len();
    let included = mask.relations();
    let excluded: Vec<usize> = (0..num_relations).filter(|&r| !mask.contains(r)).collect();
    let seed = *included
        .iter()
        .min_by_key(|&&r| graph.edges(r).len())
        .expect("nonzero mask");
    let edges: Vec<(usize, usize)> = graph
        .edges(seed)
        .iter()
        .copied()
        .filter(|&(u, i)| included.iter().all(|&r| graph.has_edge(r, u, i)))
        .filter(|&(u, i)| excluded.iter().all(|&r| !graph.has_edge(r, u, i)))
        .collect();
    BehaviorPatternMatrix::from_edges(graph, mask, edges)
}

/// Every pattern matrix in [`enumerate_patterns`] order, in one pass over the edges.
pub fn build_all_bbp(graph: &MultiplexBipartiteGraph) -> Vec<BehaviorPatternMatrix> {
    let mut masks: HashMap<(usize, usize), u32> = HashMap::new();
    for r in 0..graph.schema().len() {
        for &pair in graph.edges(r) {
            *masks.entry(pair).or_insert(0) |= 1 << r;
        }
    }
    let mut grouped: Vec<Vec<(usize, usize)>> = vec![Vec::new(); (1 << graph.schema().len()) - 1];
    for (pair, bits) in masks {
        grouped[bits as usize - 1].push(pair);
    }
    grouped
        .into_iter()
        .enumerate()
        .map(|(k, mut edges)| {
            edges.sort_unstable();
            BehaviorPatternMatrix::from_edges(graph, PatternMask(k as u32 + 1), edges)
        })
        .collect()
}

/// Learnable pattern logits: `local` feeds a softmax, `global` a softplus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternWeights {
    pub local_logits: Vec<f64>,
    pub global_logits: Vec<f64>,
}

impl PatternWeights {
    /// Uniform local attention and unit global scales.
    pub fn neutral(num_patterns: usize) -> Self {
        PatternWeights {
            local_logits: vec![0.0; num_patterns],
            global_logits: vec![softplus_inverse(1.0); num_patterns],
        }
    }

    pub fn local_weights(&self) -> Vec<f64> {
        softmax(&self.local_logits)
    }

    pub fn global_scales(&self) -> Vec<f64> {
        self.global_logits.iter().map(|&b| softplus(b)).collect()
    }
}

/// Union of all pattern matrices; each stored entry remembers its pattern.
#[derive(Debug, Clone)]
pub struct PatternIndex {
    structure: Csr,
    entry_pattern: Vec<usize>,
    counts: Array2<f64>,
}

impl PatternIndex {
    pub fn new(bbps: &[BehaviorPatternMatrix], num_nodes: usize) -> Self {
        let mut triplets = Vec::new();
        for (p, bbp) in bbps.iter().enumerate() {
            for (r, c, _) in bbp.matrix.triplets() {
                triplets.push((r, c, p as f64));
            }
        }
        let structure = Csr::from_triplets(num_nodes, triplets);
        let entry_pattern = structure.values().iter().map(|&p| p as usize).collect();
        PatternIndex {
            structure,
            entry_pattern,
            counts: pattern_counts(bbps, num_nodes),
        }
    }

    pub fn num_patterns(&self) -> usize {
        self.counts.ncols()
    }

    /// `N x P` matrix of per-node neighbor counts under each pattern.
    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn entry_pattern(&self) -> &[usize] {
        &self.entry_pattern
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalNorm {
    /// `D^{-1/2} A D^{-1/2}` with weighted degrees.
    Symmetric,
    /// The aggregated matrix as is.
    Raw,
}

/// Aggregated local adjacency plus what its reverse pass needs.
#[derive(Debug, Clone)]
pub struct LocalAdjacency {
    pub alpha: Vec<f64>,
    pub degree: Vec<f64>,
    pub matrix: Csr,
}

pub fn aggregate_local_indexed(index: &PatternIndex, logits: &[f64], norm: LocalNorm) -> LocalAdjacency {
    assert_eq!(logits.len(), index.num_patterns());
    let alpha = softmax(logits);
    let weighted: Vec<f64> = index.entry_pattern.iter().map(|&p| alpha[p]).collect();
    let weighted = index.structure.with_values(weighted);
    let degree = weighted.row_sums();
    let matrix = match norm {
        LocalNorm::Raw => weighted,
        LocalNorm::Symmetric => {
            let values = weighted
                .triplets()
                .map(|(r, c, v)| v / (degree[r] * degree[c]).sqrt())
                .collect();
            weighted.with_values(values)
        }
    };
    LocalAdjacency { alpha, degree, matrix }
}

/// `sum_p softmax(logits)_p * A_p`, normalized per `norm`.
pub fn aggregate_local(bbps: &[BehaviorPatternMatrix], logits: &[f64], norm: LocalNorm) -> Csr {
    let n = bbps.first().map_or(0, |b| b.matrix.n());
    aggregate_local_indexed(&PatternIndex::new(bbps, n), logits, norm).matrix
}

/// Pulls gradients on the stored entries of the local adjacency back to the logits.
pub fn aggregate_local_backward(
    index: &PatternIndex,
    adj: &LocalAdjacency,
    norm: LocalNorm,
    d_entries: &[f64],
) -> Vec<f64> {
    let mut d_alpha = vec![0.0; adj.alpha.len()];
    match norm {
        LocalNorm::Raw => {
            for (&p, &g) in index.entry_pattern.iter().zip(d_entries) {
                d_alpha[p] += g;
            }
        }
        LocalNorm::Symmetric => {
            let deg = &adj.degree;
            let mut d_degree = vec![0.0; deg.len()];
            let mut d_weight = vec![0.0; d_entries.len()];
            for (e, (r, c, a)) in adj.matrix.triplets().enumerate() {
                let g = d_entries[e];
                d_weight[e] = g / (deg[r] * deg[c]).sqrt();
                d_degree[r] -= 0.5 * g * a / deg[r];
                d_degree[c] -= 0.5 * g * a / deg[c];
            }
            for (e, (r, _, _)) in adj.matrix.triplets().enumerate() {
                d_alpha[index.entry_pattern[e]] += d_weight[e] + d_degree[r];
            }
        }
    }
    softmax_backward(&adj.alpha, &d_alpha)
}

/// Layers `H^0 .. H^L` of `H^l = adj * H^{l-1}`.
pub fn propagate_layers(adj: &Csr, base: &Array2<f64>, layers: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(layers + 1);
    out.push(base.clone());
    for l in 0..layers {
        let next = adj.spmm(&out[l]);
        out.push(next);
    }
    out
}

fn mean_of_layers(layers: &[Array2<f64>]) -> Array2<f64> {
    let l = layers.len() - 1;
    let mut acc = Array2::zeros(layers[0].raw_dim());
    for h in &layers[1..] {
        acc += h;
    }
    acc / l as f64
}

/// Local representation: mean of layers `1..=L` (layer 0 excluded).
pub fn propagate_local(adj: &Csr, base: &Array2<f64>, layers: usize) -> Array2<f64> {
    assert!(layers >= 1, "at least one layer");
    mean_of_layers(&propagate_layers(adj, base, layers))
}

pub(crate) fn propagate_local_from_layers(layers: &[Array2<f64>]) -> Array2<f64> {
    mean_of_layers(layers)
}

/// Reverse pass of [`propagate_local`] for a symmetric `adj`. Returns the
/// gradient on the base table and on every stored entry of `adj`.
pub fn propagate_local_backward(
    adj: &Csr,
    layers: &[Array2<f64>],
    d_out: &Array2<f64>,
) -> (Array2<f64>, Vec<f64>) {
    let depth = layers.len() - 1;
    let share = d_out / depth as f64;
    let mut d_entries = vec![0.0; adj.nnz()];
    let mut adjoint = share.clone();
    for l in (1..=depth).rev() {
        accumulate_entry_grads(adj, &adjoint, &layers[l - 1], &mut d_entries);
        let back = adj.spmm(&adjoint);
        if l == 1 {
            return (back, d_entries);
        }
        adjoint = back + &share;
    }
    unreachable!("depth >= 1")
}

/// `d_entries[e] += <upstream[row], input[col]>` for each stored entry `e`.
fn accumulate_entry_grads(adj: &Csr, upstream: &Array2<f64>, input: &Array2<f64>, d_entries: &mut [f64]) {
    let mut e = 0;
    for r in 0..adj.n() {
        let up = upstream.row(r);
        for (c, _) in adj.row(r) {
            d_entries[e] += up.dot(&input.row(c));
            e += 1;
        }
    }
}

/// Per-node neighbor counts for each pattern (`N x P`).
pub fn pattern_counts(bbps: &[BehaviorPatternMatrix], num_nodes: usize) -> Array2<f64> {
    let mut b = Array2::zeros((num_nodes, bbps.len()));
    for (p, bbp) in bbps.iter().enumerate() {
        for (node, count) in bbp.matrix.row_sums().into_iter().enumerate() {
            b[[node, p]] = count;
        }
    }
    b
}

/// Pattern counts with each column scaled by `softplus(global_logits)`.
pub fn build_global_matrix(bbps: &[BehaviorPatternMatrix], global_logits: &[f64]) -> Array2<f64> {
    let n = bbps.first().map_or(0, |b| b.matrix.n());
    scale_columns(&pattern_counts(bbps, n), global_logits)
}

pub(crate) fn scale_columns(counts: &Array2<f64>, global_logits: &[f64]) -> Array2<f64> {
    assert_eq!(counts.ncols(), global_logits.len());
    let mut b = counts.clone();
    for (mut col, &logit) in b.axis_iter_mut(Axis(1)).zip(global_logits) {
        col *= softplus(logit);
    }
    b
}

/// Gradient on the global logits given the gradient on the scaled matrix.
pub(crate) fn scale_columns_backward(counts: &Array2<f64>, global_logits: &[f64], d_b: &Array2<f64>) -> Vec<f64> {
    global_logits
        .iter()
        .enumerate()
        .map(|(p, &logit)| {
            let d_scale: f64 = counts.column(p).dot(&d_b.column(p));
            d_scale * sigmoid(logit)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlobalNorm {
    /// Row-wise L1 normalization.
    Row,
    /// `D^{-1/2} S D^{-1/2}`.
    Symmetric,
}

/// Dense `norm(B B^T)`. Zero rows stay zero.
pub fn build_global_similarity(b: &Array2<f64>, norm: GlobalNorm) -> Array2<f64> {
    let s = b.dot(&b.t());
    let sums: Vec<f64> = s.rows().into_iter().map(|r| r.sum()).collect();
    let mut out = s;
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = match norm {
            GlobalNorm::Row if sums[i] > 0.0 => *v / sums[i],
            GlobalNorm::Symmetric if sums[i] > 0.0 && sums[j] > 0.0 => *v / (sums[i] * sums[j]).sqrt(),
            _ => 0.0,
        };
    }
    out
}

/// Dense global propagation; returns the last layer only.
pub fn propagate_global(adj_glo: &Array2<f64>, base: &Array2<f64>, layers: usize) -> Array2<f64> {
    assert!(layers >= 1, "at least one layer");
    let mut h = base.clone();
    for _ in 0..layers {
        h = adj_glo.dot(&h);
    }
    h
}

/// `norm(B B^T)` applied without materializing the `N x N` similarity:
/// `x -> D^{-1} B (B^T x)` (or the symmetric variant) costs `O(N P d)`.
#[derive(Debug, Clone)]
pub struct GlobalOperator {
    b: Array2<f64>,
    col_sums: Vec<f64>,
    row_sums: Vec<f64>,
    norm: GlobalNorm,
}

impl GlobalOperator {
    pub fn new(b: Array2<f64>, norm: GlobalNorm) -> Self {
        let col_sums: Vec<f64> = b.columns().into_iter().map(|c| c.sum()).collect();
        let row_sums: Vec<f64> = b.rows().into_iter().map(|r| crate::math::dot(&r.to_vec(), &col_sums)).collect();
        GlobalOperator { b, col_sums, row_sums, norm }
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.b
    }

    /// Per-row scale applied on the output side (`1/q` or `q^{-1/2}`).
    fn out_scale(&self) -> Vec<f64> {
        self.row_sums
            .iter()
            .map(|&q| match (self.norm, q > 0.0) {
                (_, false) => 0.0,
                (GlobalNorm::Row, true) => 1.0 / q,
                (GlobalNorm::Symmetric, true) => 1.0 / q.sqrt(),
            })
            .collect()
    }

    fn in_scaled(&self, x: &Array2<f64>, scale: &[f64]) -> Array2<f64> {
        match self.norm {
            GlobalNorm::Row => x.clone(),
            GlobalNorm::Symmetric => scale_rows(x, scale),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let scale = self.out_scale();
        let xs = self.in_scaled(x, &scale);
        let bm = self.b.dot(&self.b.t().dot(&xs));
        scale_rows(&bm, &scale)
    }

    /// Reverse pass of [`GlobalOperator::apply`] at input `x` with output
    /// gradient `y`. Returns `(dx, dB)`.
    pub fn backward(&self, x: &Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let scale = self.out_scale();
        let xs = self.in_scaled(x, &scale);
        let m = self.b.t().dot(&xs);
        let bm = self.b.dot(&m);
        let n = self.b.nrows();
        // gradient on the per-row output scale
        let mut d_scale: Vec<f64> = (0..n).map(|i| y.row(i).dot(&bm.row(i))).collect();
        let y_scaled = scale_rows(y, &scale);
        let mut d_b = y_scaled.dot(&m.t());
        let d_m = self.b.t().dot(&y_scaled);
        d_b += &xs.dot(&d_m.t());
        let d_xs = self.b.dot(&d_m);
        let dx = match self.norm {
            GlobalNorm::Row => d_xs,
            GlobalNorm::Symmetric => {
                for (i, ds) in d_scale.iter_mut().enumerate() {
                    *ds += x.row(i).dot(&d_xs.row(i));
                }
                scale_rows(&d_xs, &scale)
            }
        };
        // scale = q^-1 or q^-1/2, q = B (B^T 1)
        let d_q: Vec<f64> = (0..n)
            .map(|i| {
                let q = self.row_sums[i];
                if q <= 0.0 {
                    return 0.0;
                }
                match self.norm {
                    GlobalNorm::Row => -d_scale[i] / (q * q),
                    GlobalNorm::Symmetric => -0.5 * d_scale[i] * q.powf(-1.5),
                }
            })
            .collect();
        let p = self.b.ncols();
        let mut d_col = vec![0.0; p];
        for i in 0..n {
            for k in 0..p {
                d_b[[i, k]] += d_q[i] * self.col_sums[k];
                d_col[k] += self.b[[i, k]] * d_q[i];
            }
        }
        for mut row in d_b.rows_mut() {
            for (v, dc) in row.iter_mut().zip(&d_col) {
                *v += dc;
            }
        }
        (dx, d_b)
    }
}

fn scale_rows(x: &Array2<f64>, scale: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, &s) in out.rows_mut().into_iter().zip(scale) {
        row *= s;
    }
    out
}

/// Layers `H^0 .. H^L` of global propagation through the factored operator.
pub fn propagate_global_layers(op: &GlobalOperator, base: &Array2<f64>, layers: usize) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(layers + 1);
    out.push(base.clone());
    for l in 0..layers {
        let next = op.apply(&out[l]);
        out.push(next);
    }
    out
}

/// Reverse pass through every global layer. Returns `(d_base, dB)`.
pub fn propagate_global_backward(
    op: &GlobalOperator,
    layers: &[Array2<f64>],
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut y = d_out.clone();
    let mut d_b = Array2::zeros(op.b.raw_dim());
    for l in (1..layers.len()).rev() {
        let (dx, db) = op.backward(&layers[l - 1], &y);
        d_b += &db;
        y = dx;
    }
    (y, d_b)
}

/// Average pooling of the local and global views.
pub fn ebp_embeddings(h_loc: &Array2<f64>, h_glo: &Array2<f64>) -> Result<Array2<f64>> {
    if h_loc.dim() != h_glo.dim() {
        return Err(Error::Shape(format!(
            "local {:?} vs global {:?}",
            h_loc.dim(),
            h_glo.dim()
        )));
    }
    Ok((h_loc + h_glo) * 0.5)
}
