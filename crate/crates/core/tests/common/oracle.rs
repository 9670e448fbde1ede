//! Straight-line dense re-implementation of the whole objective.
//!
//! Every matrix is materialized as a dense `N x N` array and every step is
//! written out directly, so that it shares no numeric code with the library.

use std::collections::{BTreeMap, BTreeSet};

use dcmgnn::graph::MultiplexBipartiteGraph;
use dcmgnn::model::{ChainScore, ModelConfig, ModelParams};
use dcmgnn::patterns::{GlobalNorm, LocalNorm};
use dcmgnn::training::TrainBatch;
use ndarray::{Array1, Array2, Axis};

pub struct OracleTerms {
    pub total: f64,
    pub chain_bpr: Vec<f64>,
    pub chain_reg: Vec<f64>,
    pub chain_weights: Vec<f64>,
    pub contrastive: Vec<f64>,
    pub relation_weights: Vec<f64>,
    pub final_bpr: f64,
    pub final_reg: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn lrelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Pair -> relation bitmask over every relation.
pub fn pair_masks(graph: &MultiplexBipartiteGraph) -> BTreeMap<(usize, usize), u32> {
    let mut masks = BTreeMap::new();
    for r in 0..graph.schema().len() {
        for &pair in graph.edges(r) {
            *masks.entry(pair).or_insert(0) |= 1 << r;
        }
    }
    masks
}

/// Dense symmetric indicator of the pairs whose exact mask is `mask`.
pub fn dense_pattern(graph: &MultiplexBipartiteGraph, mask: u32) -> Array2<f64> {
    let u = graph.num_users();
    let n = graph.num_nodes();
    let mut a = Array2::zeros((n, n));
    for (&(user, item), &m) in &pair_masks(graph) {
        if m == mask {
            a[[user, u + item]] = 1.0;
            a[[u + item, user]] = 1.0;
        }
    }
    a
}

pub fn dense_relation(graph: &MultiplexBipartiteGraph, r: usize) -> Array2<f64> {
    let u = graph.num_users();
    let n = graph.num_nodes();
    let mut a = Array2::zeros((n, n));
    for &(user, item) in graph.edges(r) {
        a[[user, u + item]] = 1.0;
        a[[u + item, user]] = 1.0;
    }
    a
}

/// `D^{-1/2} A D^{-1/2}` with zero rows left at zero.
pub fn sym_normalize(a: &Array2<f64>) -> Array2<f64> {
    let deg = a.sum_axis(Axis(1));
    let mut out = a.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        if *v != 0.0 {
            *v /= (deg[i] * deg[j]).sqrt();
        }
    }
    out
}

pub fn row_normalize(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Dense local aggregated (and normalized) adjacency.
pub fn local_adjacency(graph: &MultiplexBipartiteGraph, logits: &[f64], norm: LocalNorm) -> Array2<f64> {
    let n = graph.num_nodes();
    let alpha = softmax(logits);
    let mut a = Array2::zeros((n, n));
    for (p, w) in alpha.iter().enumerate() {
        a = a + dense_pattern(graph, p as u32 + 1) * *w;
    }
    match norm {
        LocalNorm::Symmetric => sym_normalize(&a),
        LocalNorm::Raw => a,
    }
}

/// Dense `norm(B B^T)` with `B = counts * diag(softplus(logits))`.
pub fn global_similarity(graph: &MultiplexBipartiteGraph, logits: &[f64], norm: GlobalNorm) -> Array2<f64> {
    let n = graph.num_nodes();
    let mut b = Array2::zeros((n, logits.len()));
    for (p, &l) in logits.iter().enumerate() {
        let counts = dense_pattern(graph, p as u32 + 1).sum_axis(Axis(1));
        for v in 0..n {
            b[[v, p]] = counts[v] * softplus(l);
        }
    }
    let s = b.dot(&b.t());
    match norm {
        GlobalNorm::Row => row_normalize(&s),
        GlobalNorm::Symmetric => {
            let deg = s.sum_axis(Axis(1));
            let mut out = s.clone();
            for ((i, j), v) in out.indexed_iter_mut() {
                *v = if deg[i] > 0.0 && deg[j] > 0.0 { *v / (deg[i] * deg[j]).sqrt() } else { 0.0 };
            }
            out
        }
    }
}

fn mat_pow_apply(a: &Array2<f64>, x: &Array2<f64>, l: usize) -> Array2<f64> {
    let mut h = x.clone();
    for _ in 0..l {
        h = a.dot(&h);
    }
    h
}

pub fn local_embedding(a: &Array2<f64>, e0: &Array2<f64>, layers: usize) -> Array2<f64> {
    let mut acc = Array2::zeros(e0.raw_dim());
    for l in 1..=layers {
        acc = acc + mat_pow_apply(a, e0, l);
    }
    acc / layers as f64
}

pub fn global_embedding(s: &Array2<f64>, e0: &Array2<f64>, layers: usize) -> Array2<f64> {
    mat_pow_apply(s, e0, layers)
}

pub fn relation_embedding(graph: &MultiplexBipartiteGraph, r: usize, e0: &Array2<f64>, layers: usize) -> Array2<f64> {
    let a = sym_normalize(&dense_relation(graph, r));
    let mut acc = Array2::zeros(e0.raw_dim());
    for l in 0..=layers {
        acc = acc + mat_pow_apply(&a, e0, l);
    }
    acc
}

/// Chains as ordered relation lists: masks containing the target with at
/// least two relations, ascending by mask value, ordered by `order`.
pub fn chains(num_relations: usize, target: usize, order: &[usize]) -> Vec<(u32, Vec<usize>)> {
    (1u32..(1 << num_relations))
        .filter(|m| m & (1 << target) != 0 && m.count_ones() >= 2)
        .map(|m| (m, order.iter().copied().filter(|&r| m & (1 << r) != 0).collect()))
        .collect()
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// The complete objective for one batch, single shared base table.
pub fn objective(
    graph: &MultiplexBipartiteGraph,
    order: &[usize],
    params: &ModelParams,
    batch: &TrainBatch,
    cfg: &ModelConfig,
) -> OracleTerms {
    assert_eq!(params.base.len(), 1, "oracle covers the shared-table model");
    assert!(!cfg.per_user_weights, "oracle covers batch-level weights");
    let e0 = &params.base[0];
    let u_count = graph.num_users();
    let d = cfg.dim;
    let nrel = graph.schema().len();
    let target = graph.schema().target();
    let l = cfg.layers;

    let a_loc = local_adjacency(graph, &params.patterns.local_logits, cfg.local_norm);
    let h_loc = local_embedding(&a_loc, e0, l);
    let s_glo = global_similarity(graph, &params.patterns.global_logits, cfg.global_norm);
    let h_glo = global_embedding(&s_glo, e0, l);
    let ebp = (&h_loc + &h_glo) / 2.0;

    let e_rel: Vec<Array2<f64>> = (0..nrel).map(|r| relation_embedding(graph, r, e0, l)).collect();
    let mut rel_sum = Array2::<f64>::zeros(e0.raw_dim());
    for e in &e_rel {
        rel_sum += e;
    }

    let chain_list = chains(nrel, target, order);
    let mut chain_steps: Vec<Vec<Array2<f64>>> = Vec::new();
    for (c, (_, rels)) in chain_list.iter().enumerate() {
        let mut steps = vec![e_rel[rels[0]].clone()];
        for j in 0..rels.len() - 1 {
            let prev = &steps[j];
            let mut next = Array2::zeros(prev.raw_dim());
            for v in 0..prev.nrows() {
                let w = if v < u_count { &params.chains[c].user[j] } else { &params.chains[c].item[j] };
                next.row_mut(v).assign(&w.dot(&prev.row(v)));
            }
            steps.push(next);
        }
        chain_steps.push(steps);
    }
    let mut e_c = Array2::<f64>::zeros(e0.raw_dim());
    for steps in &chain_steps {
        for s in steps {
            e_c += s;
        }
    }
    let fin = (&ebp + &rel_sum + &e_c) / 3.0;

    let bpr = |z: &Array2<f64>, triples: &[dcmgnn::training::Triple]| -> f64 {
        triples
            .iter()
            .map(|t| {
                let zu = z.row(t.user);
                let m = zu.dot(&z.row(u_count + t.pos)) - zu.dot(&z.row(u_count + t.neg));
                softplus(-m)
            })
            .sum()
    };
    let reg_nodes = |triples: &[dcmgnn::training::Triple]| -> f64 {
        let nodes: BTreeSet<usize> = triples
            .iter()
            .flat_map(|t| [t.user, u_count + t.pos, u_count + t.neg])
            .collect();
        nodes.iter().map(|&v| e0.row(v).dot(&e0.row(v))).sum()
    };
    let w_sq = |c: usize| -> f64 {
        params.chains[c]
            .user
            .iter()
            .chain(&params.chains[c].item)
            .map(|w| w.iter().map(|x| x * x).sum::<f64>())
            .sum()
    };

    let n_chains = chain_list.len();
    let mut chain_bpr = Vec::new();
    let mut chain_reg = Vec::new();
    for c in 0..n_chains {
        let z = match cfg.chain_score {
            ChainScore::LastStep => chain_steps[c].last().unwrap().clone(),
            ChainScore::Aggregated => e_c.clone(),
        };
        chain_bpr.push(bpr(&z, &batch.chain_triples[c]));
        chain_reg.push(reg_nodes(&batch.chain_triples[c]) + w_sq(c));
    }
    let final_bpr = bpr(&fin, &batch.final_triples);
    let final_reg = reg_nodes(&batch.final_triples) + (0..n_chains).map(w_sq).sum::<f64>();

    // contrastive, batch users = sorted unique users of the final triples
    let users: Vec<usize> = batch.final_triples.iter().map(|t| t.user).collect::<BTreeSet<_>>().into_iter().collect();
    let aux: Vec<usize> = (0..nrel).filter(|&r| r != target).collect();
    let mut rcl = vec![0.0; nrel];
    for &r in &aux {
        let mut loss = 0.0;
        for &a in &users {
            let anchor = e_rel[target].row(a).to_owned();
            let logits: Vec<f64> = users
                .iter()
                .map(|&b| cosine(&anchor, &e_rel[r].row(b).to_owned()) / cfg.contrast.tau)
                .collect();
            let pos = users.iter().position(|&b| b == a).unwrap();
            loss -= softmax(&logits)[pos].ln();
        }
        rcl[r] = loss;
    }

    let slope = cfg.contrast.leaky_slope;
    let mut raw_c = vec![0.0; n_chains];
    for &u in &users {
        for (c, (_, rels)) in chain_list.iter().enumerate() {
            let lam: f64 = rels.iter().filter(|&&r| r != target).map(|&r| rcl[r]).sum();
            let mut f = vec![cfg.contrast.mu * lam; d];
            f.extend(e_c.row(u).iter());
            f.extend(fin.row(u).iter());
            let pre: f64 = f.iter().zip(&params.chain_encoder.weights).map(|(a, b)| a * b).sum::<f64>()
                + params.chain_encoder.bias;
            raw_c[c] += lrelu(pre, slope) / users.len() as f64;
        }
    }
    let chain_weights: Vec<f64> = softmax(&raw_c).iter().map(|p| p * n_chains as f64).collect();
    let mut raw_r = vec![0.0; aux.len()];
    for &u in &users {
        for (k, &r) in aux.iter().enumerate() {
            let f: Vec<f64> = e_rel[r].row(u).iter().chain(fin.row(u).iter()).map(|v| rcl[r] * v).collect();
            let pre: f64 = f.iter().zip(&params.relation_encoder.weights).map(|(a, b)| a * b).sum::<f64>()
                + params.relation_encoder.bias;
            raw_r[k] += lrelu(pre, slope) / users.len() as f64;
        }
    }
    let relation_weights: Vec<f64> = softmax(&raw_r).iter().map(|p| p * aux.len() as f64).collect();

    let mut total = 0.0;
    for c in 0..n_chains {
        total += chain_weights[c] * (chain_bpr[c] + cfg.lambda * chain_reg[c]);
    }
    for (k, &r) in aux.iter().enumerate() {
        total += cfg.mu1 * relation_weights[k] * rcl[r];
    }
    total += cfg.mu2 * (final_bpr + cfg.lambda * final_reg);
    OracleTerms {
        total,
        chain_bpr,
        chain_reg,
        chain_weights,
        contrastive: aux.iter().map(|&r| rcl[r]).collect(),
        relation_weights,
        final_bpr,
        final_reg,
    }
}
