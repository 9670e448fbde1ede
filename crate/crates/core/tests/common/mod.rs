//! Fixtures and independent dense reference implementations shared by the
//! integration tests. Nothing here calls into the library's numeric code.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracle;

use dcmgnn::graph::{MultiplexBipartiteGraph, RelationSchema};
use dcmgnn::model::{Model, ModelConfig, ModelParams};
use dcmgnn::rng::{stream, Stream};
use dcmgnn::training::{TrainBatch, Triple};
use rand::Rng;

pub fn schema3() -> RelationSchema {
    RelationSchema::new(&["view", "cart", "buy"], "buy", None).unwrap()
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|k| format!("{prefix}{k}")).collect()
}

pub fn graph_from(schema: RelationSchema, users: usize, items: usize, edges: Vec<Vec<(usize, usize)>>) -> MultiplexBipartiteGraph {
    MultiplexBipartiteGraph::from_edges(schema, ids("u", users), ids("i", items), edges).unwrap()
}

/// 4 users and 6 items (N = 10) with every chain pattern populated.
pub fn tiny_graph() -> MultiplexBipartiteGraph {
    let view = vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 3), (1, 5), (2, 0), (2, 4), (3, 2), (3, 5)];
    let cart = vec![(0, 0), (0, 1), (1, 3), (1, 5), (2, 4), (3, 3), (3, 5)];
    let buy = vec![(0, 0), (0, 2), (1, 3), (1, 5), (2, 4), (3, 1), (3, 3)];
    graph_from(schema3(), 4, 6, vec![view, cart, buy])
}

/// A config with every loss term switched on and a small dim.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 4,
        layers: 2,
        lambda: 0.05,
        mu1: 0.3,
        mu2: 0.7,
        ..ModelConfig::default()
    }
}

/// Initial parameters pushed away from the neutral pattern weights and zero
/// biases so that every path carries signal.
pub fn tiny_params(model: &Model, seed: u64) -> ModelParams {
    let mut p = model.init_params(seed);
    let mut rng = stream(seed, Stream::Synth);
    for v in p.patterns.local_logits.iter_mut().chain(p.patterns.global_logits.iter_mut()) {
        *v += rng.gen_range(-0.5..0.5);
    }
    for t in &mut p.base {
        t.mapv_inplace(|v| v * 4.0);
    }
    p.chain_encoder.bias = 0.3;
    p.relation_encoder.bias = 0.2;
    p
}

fn negative_for(graph: &MultiplexBipartiteGraph, relation_items: &[usize], rng: &mut impl Rng) -> usize {
    loop {
        let i = rng.gen_range(0..graph.num_items());
        if !relation_items.contains(&i) {
            return i;
        }
    }
}

/// Every target edge as a final triple and every chain positive once.
pub fn tiny_batch(model: &Model, graph: &MultiplexBipartiteGraph, seed: u64) -> TrainBatch {
    let mut rng = stream(seed, Stream::Negatives);
    let target = graph.schema().target();
    let bought = graph.items_by_user(target);
    let final_triples = graph
        .edges(target)
        .iter()
        .map(|&(user, pos)| Triple { user, pos, neg: negative_for(graph, &bought[user], &mut rng) })
        .collect();
    let chain_triples = (0..model.chains().len())
        .map(|c| {
            let pos = model.chain_positives(c);
            pos.iter()
                .map(|&(user, item)| {
                    let mine: Vec<usize> = pos.iter().filter(|p| p.0 == user).map(|p| p.1).collect();
                    Triple { user, pos: item, neg: negative_for(graph, &mine, &mut rng) }
                })
                .collect()
        })
        .collect();
    TrainBatch::new(final_triples, chain_triples)
}

/// Max over coordinates of `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

/// Worst relative error per tensor between the analytic gradient and central
/// finite differences of the total objective.
pub fn gradient_errors(model: &Model, params: &ModelParams, batch: &TrainBatch) -> Vec<(String, f64)> {
    let (_, grads) = model.objective_and_grad(params, batch).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut out = Vec::new();
    for (t, (name, a)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for k in 0..a.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t][k] += delta;
                model.objective(&p, batch).unwrap().total
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a[k], numeric, FD_FLOOR));
        }
        out.push((name.clone(), worst));
    }
    out
}

