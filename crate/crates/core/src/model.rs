//! Model parameters, the forward pass over both channels and the
//! hand-derived reverse pass of the joint objective.
//!
//! Propagation always runs over the full graph. Everything downstream of it
//! (chain transforms, final embeddings, losses and weighting encoders) runs
//! on the "active" rows of a batch only, and its gradients are scattered back
//! to full `N x d` tables before the propagation adjoints.

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chains::{
    chain_backward, chain_embedding, chain_forward, enumerate_chains_with_order, final_embedding,
    ChainTransforms, RelationChain,
};
use crate::contrastive::{chain_knowledge, normalize_weights, ContrastConfig, EncoderParams, InfoNce};
use crate::error::{Error, Result};
use crate::graph::{MultiplexBipartiteGraph, RelationSchema};
use crate::math::{dot, leaky_relu, leaky_relu_grad, sigmoid, softmax, softmax_backward, softplus};
use crate::patterns::{
    aggregate_local_backward, aggregate_local_indexed, build_all_bbp, ebp_embeddings, propagate_global_backward,
    propagate_global_layers, propagate_layers, propagate_local_backward, propagate_local_from_layers, scale_columns,
    scale_columns_backward, GlobalNorm, GlobalOperator, LocalAdjacency, LocalNorm, PatternIndex, PatternWeights,
};
use crate::relation::{normalized_adjacency, propagate_summed};
use crate::rng::{stream, Stream};
use crate::sparse::Csr;
use crate::training::{TrainBatch, Triple};

/// Which chain table scores a chain's BPR triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainScore {
    /// The chain's own last step.
    LastStep,
    /// The sum of all steps of all chains.
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub contrast: ContrastConfig,
    pub local_norm: LocalNorm,
    pub global_norm: GlobalNorm,
    /// Three base tables (local, global, relation) instead of one shared table.
    pub separate_base: bool,
    pub chain_score: ChainScore,
    pub per_user_weights: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            lambda: 1e-4,
            mu1: 0.1,
            mu2: 0.5,
            contrast: ContrastConfig::default(),
            local_norm: LocalNorm::Symmetric,
            global_norm: GlobalNorm::Row,
            separate_base: false,
            chain_score: ChainScore::LastStep,
            per_user_weights: false,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("mu1", self.mu1), ("mu2", self.mu2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init std must be > 0, got {}", self.init_std)));
        }
        self.contrast.validate()
    }
}

const LOCAL: usize = 0;
const GLOBAL: usize = 1;
const RELATION: usize = 2;

/// Every learnable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// One shared table, or local / global / relation tables.
    pub base: Vec<Array2<f64>>,
    pub patterns: PatternWeights,
    pub chains: Vec<ChainTransforms>,
    pub chain_encoder: EncoderParams,
    pub relation_encoder: EncoderParams,
}

impl ModelParams {
    /// Base table feeding the local (0), global (1) or relation (2) channel.
    pub fn table(&self, channel: usize) -> &Array2<f64> {
        &self.base[self.table_index(channel)]
    }

    fn table_index(&self, channel: usize) -> usize {
        if self.base.len() == 1 {
            0
        } else {
            channel
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            base: self.base.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            patterns: PatternWeights {
                local_logits: vec![0.0; self.patterns.local_logits.len()],
                global_logits: vec![0.0; self.patterns.global_logits.len()],
            },
            chains: self.chains.iter().map(|c| ChainTransforms::zeros(c.steps(), self.dim())).collect(),
            chain_encoder: EncoderParams::zeros(self.chain_encoder.weights.len()),
            relation_encoder: EncoderParams::zeros(self.relation_encoder.weights.len()),
        }
    }

    pub fn dim(&self) -> usize {
        self.base[0].ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.base[0].nrows()
    }

    /// Named flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        let base_names = ["base.local", "base.global", "base.relation"];
        for (k, t) in self.base.iter().enumerate() {
            let name = if self.base.len() == 1 { "base" } else { base_names[k] };
            out.push((name.into(), flat(t)));
        }
        out.push(("pattern.local_logits".into(), &self.patterns.local_logits));
        out.push(("pattern.global_logits".into(), &self.patterns.global_logits));
        for (i, c) in self.chains.iter().enumerate() {
            for (j, w) in c.user.iter().enumerate() {
                out.push((format!("chain{i}.user{j}"), flat(w)));
            }
            for (j, w) in c.item.iter().enumerate() {
                out.push((format!("chain{i}.item{j}"), flat(w)));
            }
        }
        out.push(("encoder.chain.weights".into(), &self.chain_encoder.weights));
        out.push(("encoder.chain.bias".into(), std::slice::from_ref(&self.chain_encoder.bias)));
        out.push(("encoder.relation.weights".into(), &self.relation_encoder.weights));
        out.push(("encoder.relation.bias".into(), std::slice::from_ref(&self.relation_encoder.bias)));
        out
    }

    /// Mutable flat views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for t in &mut self.base {
            out.push(flat_mut(t));
        }
        out.push(&mut self.patterns.local_logits);
        out.push(&mut self.patterns.global_logits);
        for c in &mut self.chains {
            for w in &mut c.user {
                out.push(flat_mut(w));
            }
            for w in &mut c.item {
                out.push(flat_mut(w));
            }
        }
        out.push(&mut self.chain_encoder.weights);
        out.push(std::slice::from_mut(&mut self.chain_encoder.bias));
        out.push(&mut self.relation_encoder.weights);
        out.push(std::slice::from_mut(&mut self.relation_encoder.bias));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

/// Full-graph propagation results and the caches their adjoints need.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub local_adj: LocalAdjacency,
    pub local_layers: Vec<Array2<f64>>,
    pub h_loc: Array2<f64>,
    pub global_op: GlobalOperator,
    pub global_layers: Vec<Array2<f64>>,
    /// Relation-specific embeddings `e^{(r)}`, one per schema relation.
    pub relation: Vec<Array2<f64>>,
}

impl Propagation {
    pub fn h_glo(&self) -> &Array2<f64> {
        self.global_layers.last().expect("at least the base layer")
    }
}

/// Downstream views restricted to a sorted set of node rows (users first).
#[derive(Debug, Clone)]
pub struct Head {
    pub rows: Vec<usize>,
    pub user_rows: usize,
    pub ebp: Array2<f64>,
    pub relation: Vec<Array2<f64>>,
    pub relation_sum: Array2<f64>,
    pub steps: Vec<Vec<Array2<f64>>>,
    pub chain_sum: Array2<f64>,
    pub embedding: Array2<f64>,
}

/// Anchor rows, candidate rows and the cached forward pass for one auxiliary relation.
type BatchInfoNce = (Array2<f64>, Array2<f64>, InfoNce);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub chain_bpr: Vec<f64>,
    pub chain_reg: Vec<f64>,
    pub chain_weights: Vec<f64>,
    /// Relation InfoNCE per auxiliary relation, in schema order.
    pub contrastive: Vec<f64>,
    pub relation_weights: Vec<f64>,
    pub final_bpr: f64,
    pub final_reg: f64,
    pub zero_norm_rows: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    schema: RelationSchema,
    num_users: usize,
    num_items: usize,
    pattern_index: PatternIndex,
    pattern_edges: Vec<Vec<(usize, usize)>>,
    relation_adj: Vec<Csr>,
    chains: Vec<RelationChain>,
    auxiliaries: Vec<usize>,
}

impl Model {
    /// Builds the fixed graph operators from the training graph. `chain_order`
    /// overrides the schema's canonical order inside every chain.
    pub fn new(train: &MultiplexBipartiteGraph, config: ModelConfig, chain_order: Option<&[usize]>) -> Result<Self> {
        config.validate()?;
        let schema = train.schema().clone();
        let order = chain_order.unwrap_or(schema.canonical_order()).to_vec();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..schema.len()).collect::<Vec<_>>() {
            return Err(Error::Config(format!("chain order {order:?} is not a permutation of the relations")));
        }
        let bbps = build_all_bbp(train);
        let pattern_index = PatternIndex::new(&bbps, train.num_nodes());
        let pattern_edges = bbps.into_iter().map(|b| b.edges).collect();
        let relation_adj = (0..schema.len()).map(|r| normalized_adjacency(train, r)).collect();
        let chains = enumerate_chains_with_order(&schema, &order);
        let auxiliaries = schema.auxiliaries().collect();
        Ok(Model {
            config,
            num_users: train.num_users(),
            num_items: train.num_items(),
            schema,
            pattern_index,
            pattern_edges,
            relation_adj,
            chains,
            auxiliaries,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn chains(&self) -> &[RelationChain] {
        &self.chains
    }

    pub fn auxiliaries(&self) -> &[usize] {
        &self.auxiliaries
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Training `(user, item)` pairs of chain `i`'s pattern.
    pub fn chain_positives(&self, chain: usize) -> &[(usize, usize)] {
        &self.pattern_edges[self.chains[chain].mask.index()]
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let d = self.config.dim;
        let n = self.num_nodes();
        let normal = Normal::new(0.0, self.config.init_std).expect("validated std");
        let mut rng = stream(seed, Stream::InitBase);
        let tables = if self.config.separate_base { 3 } else { 1 };
        let base = (0..tables)
            .map(|_| Array2::from_shape_simple_fn((n, d), || normal.sample(&mut rng)))
            .collect();
        let mut rng = stream(seed, Stream::InitChains);
        let chains = self
            .chains
            .iter()
            .map(|c| ChainTransforms::xavier(c.steps(), d, &mut rng))
            .collect();
        let mut rng = stream(seed, Stream::InitEncoders);
        let chain_encoder = EncoderParams::xavier(3 * d, &mut rng);
        let relation_encoder = EncoderParams::xavier(2 * d, &mut rng);
        ModelParams {
            base,
            patterns: PatternWeights::neutral(self.pattern_index.num_patterns()),
            chains,
            chain_encoder,
            relation_encoder,
        }
    }

    /// Shape check of `params` against this model.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let d = self.config.dim;
        let tables = if self.config.separate_base { 3 } else { 1 };
        let mut problems = Vec::new();
        if params.base.len() != tables {
            problems.push(format!("{} base tables, expected {tables}", params.base.len()));
        }
        for t in &params.base {
            if t.dim() != (self.num_nodes(), d) {
                problems.push(format!("base table {:?}, expected {:?}", t.dim(), (self.num_nodes(), d)));
            }
        }
        let p = self.pattern_index.num_patterns();
        if params.patterns.local_logits.len() != p || params.patterns.global_logits.len() != p {
            problems.push(format!("pattern logits for {p} patterns expected"));
        }
        if params.chains.len() != self.chains.len() {
            problems.push(format!("{} chains, expected {}", params.chains.len(), self.chains.len()));
        }
        for (t, c) in params.chains.iter().zip(&self.chains) {
            if t.steps() != c.steps() || t.user.iter().chain(&t.item).any(|w| w.dim() != (d, d)) {
                problems.push(format!("chain transforms do not fit {} steps of dim {d}", c.steps()));
            }
        }
        if params.chain_encoder.weights.len() != 3 * d || params.relation_encoder.weights.len() != 2 * d {
            problems.push("encoder widths do not match the embedding dim".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(problems.join("; ")))
        }
    }

    pub fn propagate(&self, params: &ModelParams) -> Propagation {
        let layers = self.config.layers;
        let local_adj =
            aggregate_local_indexed(&self.pattern_index, &params.patterns.local_logits, self.config.local_norm);
        let local_layers = propagate_layers(&local_adj.matrix, params.table(LOCAL), layers);
        let h_loc = propagate_local_from_layers(&local_layers);
        let b = scale_columns(self.pattern_index.counts(), &params.patterns.global_logits);
        let global_op = GlobalOperator::new(b, self.config.global_norm);
        let global_layers = propagate_global_layers(&global_op, params.table(GLOBAL), layers);
        let relation = self
            .relation_adj
            .iter()
            .map(|a| propagate_summed(a, params.table(RELATION), layers))
            .collect();
        Propagation {
            local_adj,
            local_layers,
            h_loc,
            global_op,
            global_layers,
            relation,
        }
    }

    /// Downstream views for `rows`, which must be sorted and unique.
    pub fn head(&self, params: &ModelParams, prop: &Propagation, rows: Vec<usize>) -> Result<Head> {
        if rows.windows(2).any(|w| w[0] >= w[1]) || rows.last().is_some_and(|&r| r >= self.num_nodes()) {
            return Err(Error::Shape("head rows must be sorted, unique node indices".into()));
        }
        let user_rows = rows.partition_point(|&r| r < self.num_users);
        let pick = |t: &Array2<f64>| t.select(Axis(0), &rows);
        let ebp = ebp_embeddings(&pick(&prop.h_loc), &pick(prop.h_glo()))?;
        let relation: Vec<Array2<f64>> = prop.relation.iter().map(pick).collect();
        let relation_sum = crate::relation::aggregate_relations(&relation)?;
        let steps = self
            .chains
            .iter()
            .zip(&params.chains)
            .map(|(c, t)| chain_forward(t, &relation[c.first()], user_rows))
            .collect::<Result<Vec<_>>>()?;
        let chain_sum = chain_embedding(steps.iter().flatten(), ebp.dim());
        let embedding = final_embedding(&ebp, &relation_sum, &chain_sum)?;
        Ok(Head {
            rows,
            user_rows,
            ebp,
            relation,
            relation_sum,
            steps,
            chain_sum,
            embedding,
        })
    }

    /// Final embeddings of every node.
    pub fn final_embeddings(&self, params: &ModelParams) -> Result<Array2<f64>> {
        let prop = self.propagate(params);
        Ok(self.head(params, &prop, (0..self.num_nodes()).collect())?.embedding)
    }

    pub fn objective(&self, params: &ModelParams, batch: &TrainBatch) -> Result<LossBreakdown> {
        Ok(self.run(params, batch, false)?.0)
    }

    pub fn objective_and_grad(&self, params: &ModelParams, batch: &TrainBatch) -> Result<(LossBreakdown, ModelParams)> {
        let (loss, grads) = self.run(params, batch, true)?;
        Ok((loss, grads.expect("requested")))
    }

    fn check_batch(&self, batch: &TrainBatch) -> Result<()> {
        if batch.chain_triples.len() != self.chains.len() {
            return Err(Error::Shape(format!(
                "{} chain triple lists for {} chains",
                batch.chain_triples.len(),
                self.chains.len()
            )));
        }
        let bad_triple = |t: &Triple| t.user >= self.num_users || t.pos >= self.num_items || t.neg >= self.num_items;
        if batch.final_triples.iter().chain(batch.chain_triples.iter().flatten()).any(bad_triple) {
            return Err(Error::Shape("triple index out of range".into()));
        }
        if batch.users.iter().any(|&u| u >= self.num_users) || batch.users.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("batch users must be sorted, unique user indices".into()));
        }
        Ok(())
    }

    fn run(&self, params: &ModelParams, batch: &TrainBatch, want_grad: bool) -> Result<(LossBreakdown, Option<ModelParams>)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let d = cfg.dim;
        let nu = self.num_users;
        let target = self.schema.target();
        let slope = cfg.contrast.leaky_slope;
        let n_chains = self.chains.len();
        let n_aux = self.auxiliaries.len();

        // active rows
        let mut rows: Vec<usize> = batch.users.clone();
        for t in batch.final_triples.iter().chain(batch.chain_triples.iter().flatten()) {
            rows.extend([t.user, nu + t.pos, nu + t.neg]);
        }
        rows.sort_unstable();
        rows.dedup();
        let mut pos = vec![usize::MAX; self.num_nodes()];
        for (k, &r) in rows.iter().enumerate() {
            pos[r] = k;
        }
        let locate = |ts: &[Triple]| -> Vec<[usize; 3]> {
            ts.iter().map(|t| [pos[t.user], pos[nu + t.pos], pos[nu + t.neg]]).collect()
        };
        let final_loc = locate(&batch.final_triples);
        let chain_loc: Vec<Vec<[usize; 3]>> = batch.chain_triples.iter().map(|ts| locate(ts)).collect();
        let batch_users: Vec<usize> = batch.users.iter().map(|&u| pos[u]).collect();

        let prop = self.propagate(params);
        let head = self.head(params, &prop, rows)?;
        let score_table = |i: usize| -> &Array2<f64> {
            match cfg.chain_score {
                ChainScore::LastStep => head.steps[i].last().expect("chains have steps"),
                ChainScore::Aggregated => &head.chain_sum,
            }
        };

        // per-term BPR and regularizers
        let margins = |z: &Array2<f64>, loc: &[[usize; 3]]| -> Vec<f64> {
            loc.iter()
                .map(|&[u, p, n]| {
                    let zu = z.row(u);
                    zu.dot(&z.row(p)) - zu.dot(&z.row(n))
                })
                .collect()
        };
        let chain_margins: Vec<Vec<f64>> = (0..n_chains).map(|i| margins(score_table(i), &chain_loc[i])).collect();
        let final_margins = margins(&head.embedding, &final_loc);
        let chain_bpr: Vec<f64> = chain_margins.iter().map(|m| m.iter().map(|&x| softplus(-x)).sum()).collect();
        let final_bpr: f64 = final_margins.iter().map(|&x| softplus(-x)).sum();

        let term_nodes = |loc: &[[usize; 3]]| -> Vec<usize> {
            let mut nodes: Vec<usize> = loc.iter().flatten().map(|&k| head.rows[k]).collect();
            nodes.sort_unstable();
            nodes.dedup();
            nodes
        };
        let chain_nodes: Vec<Vec<usize>> = chain_loc.iter().map(|l| term_nodes(l)).collect();
        let final_nodes = term_nodes(&final_loc);
        let embed_sq = |nodes: &[usize]| -> f64 {
            params
                .base
                .iter()
                .map(|t| nodes.iter().map(|&v| t.row(v).dot(&t.row(v))).sum::<f64>())
                .sum()
        };
        let transform_sq =
            |t: &ChainTransforms| -> f64 { t.user.iter().chain(&t.item).map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum() };
        let chain_reg: Vec<f64> = (0..n_chains)
            .map(|i| embed_sq(&chain_nodes[i]) + transform_sq(&params.chains[i]))
            .collect();
        let final_reg = embed_sq(&final_nodes) + params.chains.iter().map(transform_sq).sum::<f64>();

        // relation InfoNCE over the batch users
        let mut contrastive = vec![0.0; n_aux];
        let mut rcl_by_relation = vec![0.0; self.schema.len()];
        let mut infonce: Vec<Option<BatchInfoNce>> = Vec::with_capacity(n_aux);
        let mut zero_norm_rows = 0;
        for (k, &r) in self.auxiliaries.iter().enumerate() {
            if batch_users.is_empty() {
                infonce.push(None);
                continue;
            }
            let anchor = head.relation[target].select(Axis(0), &batch_users);
            let cand = head.relation[r].select(Axis(0), &batch_users);
            let out = InfoNce::forward(&anchor, &cand, cfg.contrast.tau)?;
            contrastive[k] = out.total;
            rcl_by_relation[r] = out.total;
            zero_norm_rows += out.zero_norm;
            infonce.push(Some((anchor, cand, out)));
        }

        // chain weighting features
        let chain_users: Vec<usize> = if cfg.per_user_weights {
            let mut us: Vec<usize> = chain_loc.iter().flatten().map(|t| t[0]).collect();
            us.sort_unstable();
            us.dedup();
            us
        } else {
            batch_users.clone()
        };
        // chain_features[u][i], chain_pre[u][i]
        let mut chain_features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(chain_users.len());
        let mut chain_pre: Vec<Vec<f64>> = Vec::with_capacity(chain_users.len());
        for &u in &chain_users {
            let ec = head.chain_sum.row(u).to_vec();
            let ef = head.embedding.row(u).to_vec();
            let feats: Vec<Vec<f64>> = self
                .chains
                .iter()
                .map(|c| chain_knowledge(c, target, &rcl_by_relation, &ec, &ef, cfg.contrast.mu))
                .collect();
            chain_pre.push(
                feats
                    .iter()
                    .map(|f| dot(f, &params.chain_encoder.weights) + params.chain_encoder.bias)
                    .collect(),
            );
            chain_features.push(feats);
        }
        // relation features: rows of `batch_users`, one per auxiliary
        let mut rel_raw_features: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch_users.len());
        let mut rel_pre: Vec<Vec<f64>> = Vec::with_capacity(batch_users.len());
        for &u in &batch_users {
            let ef = head.embedding.row(u);
            let raw: Vec<Vec<f64>> = self
                .auxiliaries
                .iter()
                .map(|&r| head.relation[r].row(u).iter().chain(ef.iter()).copied().collect())
                .collect();
            rel_pre.push(
                raw.iter()
                    .zip(&self.auxiliaries)
                    .map(|(f, &r)| {
                        rcl_by_relation[r] * dot(f, &params.relation_encoder.weights) + params.relation_encoder.bias
                    })
                    .collect(),
            );
            rel_raw_features.push(raw);
        }

        // weights and total
        let batch_weights = |pre: &[Vec<f64>], n: usize| -> (Vec<f64>, Vec<f64>) {
            let mut raw = vec![0.0; n];
            if !pre.is_empty() {
                for row in pre {
                    for (acc, &p) in raw.iter_mut().zip(row) {
                        *acc += leaky_relu(p, slope);
                    }
                }
                for v in &mut raw {
                    *v /= pre.len() as f64;
                }
            }
            let w = if n == 0 { Vec::new() } else { normalize_weights(&raw) };
            (raw, w)
        };
        let per_user = |pre: &[Vec<f64>]| -> Vec<Vec<f64>> {
            pre.iter()
                .map(|row| {
                    let acts: Vec<f64> = row.iter().map(|&p| leaky_relu(p, slope)).collect();
                    if acts.is_empty() {
                        Vec::new()
                    } else {
                        normalize_weights(&acts)
                    }
                })
                .collect()
        };

        let mut total = cfg.mu2 * (final_bpr + cfg.lambda * final_reg);
        let chain_weights: Vec<f64>;
        let relation_weights: Vec<f64>;
        // per-user weights, indexed like chain_users / batch_users
        let mut chain_user_w: Vec<Vec<f64>> = Vec::new();
        let mut rel_user_w: Vec<Vec<f64>> = Vec::new();
        // chain_users slot of each active row
        let mut chain_slot = vec![usize::MAX; head.rows.len()];
        for (s, &u) in chain_users.iter().enumerate() {
            chain_slot[u] = s;
        }
        // per-user chain loss sums T[slot][i]
        let mut chain_user_loss = vec![vec![0.0; n_chains]; chain_users.len()];
        if cfg.per_user_weights {
            chain_user_w = per_user(&chain_pre);
            rel_user_w = per_user(&rel_pre);
            for i in 0..n_chains {
                let mut term = cfg.lambda * chain_reg[i];
                for (t, &m) in chain_loc[i].iter().zip(&chain_margins[i]) {
                    let s = chain_slot[t[0]];
                    let l = softplus(-m);
                    chain_user_loss[s][i] += l;
                    term += chain_user_w[s][i] * l;
                }
                total += term;
            }
            for (k, slot) in infonce.iter().enumerate() {
                if let Some((_, _, out)) = slot {
                    total += cfg.mu1 * out.per_user.iter().zip(&rel_user_w).map(|(l, w)| l * w[k]).sum::<f64>();
                }
            }
            chain_weights = column_means(&chain_user_w, n_chains);
            relation_weights = column_means(&rel_user_w, n_aux);
        } else {
            chain_weights = batch_weights(&chain_pre, n_chains).1;
            relation_weights = batch_weights(&rel_pre, n_aux).1;
            for i in 0..n_chains {
                total += chain_weights[i] * (chain_bpr[i] + cfg.lambda * chain_reg[i]);
            }
            for k in 0..n_aux {
                total += cfg.mu1 * relation_weights[k] * contrastive[k];
            }
        }

        let breakdown = LossBreakdown {
            total,
            chain_bpr,
            chain_reg,
            chain_weights,
            contrastive,
            relation_weights,
            final_bpr,
            final_reg,
            zero_norm_rows,
        };
        check_finite(&breakdown, &self.chains, &self.schema, &self.auxiliaries)?;
        if !want_grad {
            return Ok((breakdown, None));
        }

        // ---- reverse pass ----
        let mut grads = params.zeros_like();
        let rows_n = head.rows.len();
        let mut d_embedding = Array2::<f64>::zeros((rows_n, d));
        let mut d_chain_sum = Array2::<f64>::zeros((rows_n, d));
        let mut d_last: Vec<Array2<f64>> = (0..n_chains).map(|_| Array2::zeros((rows_n, d))).collect();
        let mut d_relation: Vec<Array2<f64>> = (0..self.schema.len()).map(|_| Array2::zeros((rows_n, d))).collect();
        let mut d_rcl = vec![0.0; self.schema.len()];

        // weighting encoders: gradient on the pre-activations
        let mut d_chain_pre = vec![vec![0.0; n_chains]; chain_users.len()];
        let mut d_rel_pre = vec![vec![0.0; n_aux]; batch_users.len()];
        if cfg.per_user_weights {
            for (s, pre) in chain_pre.iter().enumerate() {
                let draw = scaled_softmax_backward(pre, &chain_user_loss[s], slope);
                d_chain_pre[s] = draw;
            }
            for (a, pre) in rel_pre.iter().enumerate() {
                let up: Vec<f64> = infonce
                    .iter()
                    .map(|slot| slot.as_ref().map_or(0.0, |(_, _, out)| cfg.mu1 * out.per_user[a]))
                    .collect();
                d_rel_pre[a] = scaled_softmax_backward(pre, &up, slope);
            }
        } else {
            if !chain_pre.is_empty() && n_chains > 0 {
                let terms: Vec<f64> = (0..n_chains)
                    .map(|i| breakdown.chain_bpr[i] + cfg.lambda * breakdown.chain_reg[i])
                    .collect();
                let d_raw = batch_raw_backward(&chain_pre, &terms, slope);
                let n = chain_pre.len() as f64;
                for (s, pre) in chain_pre.iter().enumerate() {
                    for i in 0..n_chains {
                        d_chain_pre[s][i] = d_raw[i] / n * leaky_relu_grad(pre[i], slope);
                    }
                }
            }
            if !rel_pre.is_empty() && n_aux > 0 {
                let terms: Vec<f64> = breakdown.contrastive.iter().map(|l| cfg.mu1 * l).collect();
                let d_raw = batch_raw_backward(&rel_pre, &terms, slope);
                let n = rel_pre.len() as f64;
                for (a, pre) in rel_pre.iter().enumerate() {
                    for k in 0..n_aux {
                        d_rel_pre[a][k] = d_raw[k] / n * leaky_relu_grad(pre[k], slope);
                    }
                }
            }
        }
        let mut d_lambda = vec![0.0; n_chains];
        for (s, &u) in chain_users.iter().enumerate() {
            for i in 0..n_chains {
                let g = d_chain_pre[s][i];
                if g == 0.0 {
                    continue;
                }
                let f = &chain_features[s][i];
                let w = &params.chain_encoder.weights;
                grads.chain_encoder.bias += g;
                for (gw, fv) in grads.chain_encoder.weights.iter_mut().zip(f) {
                    *gw += g * fv;
                }
                d_lambda[i] += cfg.contrast.mu * g * w[..d].iter().sum::<f64>();
                for c in 0..d {
                    d_chain_sum[[u, c]] += g * w[d + c];
                    d_embedding[[u, c]] += g * w[2 * d + c];
                }
            }
        }
        for (i, c) in self.chains.iter().enumerate() {
            for &r in &c.relations {
                if r != target {
                    d_rcl[r] += d_lambda[i];
                }
            }
        }
        for (a, &u) in batch_users.iter().enumerate() {
            for (k, &r) in self.auxiliaries.iter().enumerate() {
                let g = d_rel_pre[a][k];
                if g == 0.0 {
                    continue;
                }
                let f = &rel_raw_features[a][k];
                let w = &params.relation_encoder.weights;
                let l = rcl_by_relation[r];
                grads.relation_encoder.bias += g;
                for (gw, fv) in grads.relation_encoder.weights.iter_mut().zip(f) {
                    *gw += g * l * fv;
                }
                d_rcl[r] += g * dot(f, w);
                for c in 0..d {
                    d_relation[r][[u, c]] += g * l * w[c];
                    d_embedding[[u, c]] += g * l * w[d + c];
                }
            }
        }

        // relation InfoNCE
        for (k, slot) in infonce.iter().enumerate() {
            let Some((anchor, cand, out)) = slot else { continue };
            let r = self.auxiliaries[k];
            let upstream: Vec<f64> = (0..batch_users.len())
                .map(|a| {
                    let direct = if cfg.per_user_weights {
                        cfg.mu1 * rel_user_w[a][k]
                    } else {
                        cfg.mu1 * breakdown.relation_weights[k]
                    };
                    direct + d_rcl[r]
                })
                .collect();
            let (d_anchor, d_cand) = out.backward(anchor, cand, &upstream);
            for (a, &u) in batch_users.iter().enumerate() {
                let mut row = d_relation[target].row_mut(u);
                row += &d_anchor.row(a);
                let mut row = d_relation[r].row_mut(u);
                row += &d_cand.row(a);
            }
        }

        // BPR terms
        let bpr_backward = |z: &Array2<f64>, loc: &[[usize; 3]], m: &[f64], coef: &dyn Fn(usize) -> f64, dz: &mut Array2<f64>| {
            for (t, (&[u, p, n], &margin)) in loc.iter().zip(m).enumerate() {
                let g = -coef(t) * sigmoid(-margin);
                if g == 0.0 {
                    continue;
                }
                let diff = &z.row(p) - &z.row(n);
                let zu = z.row(u).to_owned();
                dz.row_mut(u).scaled_add(g, &diff);
                dz.row_mut(p).scaled_add(g, &zu);
                dz.row_mut(n).scaled_add(-g, &zu);
            }
        };
        let two_lambda = 2.0 * cfg.lambda;
        for i in 0..n_chains {
            let coef: Box<dyn Fn(usize) -> f64> = if cfg.per_user_weights {
                let loc = &chain_loc[i];
                let slots = &chain_slot;
                let w = &chain_user_w;
                Box::new(move |t| w[slots[loc[t][0]]][i])
            } else {
                let w = breakdown.chain_weights[i];
                Box::new(move |_| w)
            };
            let target_grad = match cfg.chain_score {
                ChainScore::LastStep => &mut d_last[i],
                ChainScore::Aggregated => &mut d_chain_sum,
            };
            bpr_backward(score_table(i), &chain_loc[i], &chain_margins[i], &*coef, target_grad);
            let reg_coef = if cfg.per_user_weights { 1.0 } else { breakdown.chain_weights[i] };
            add_embed_reg(&mut grads, params, &chain_nodes[i], two_lambda * reg_coef);
            add_transform_reg(&mut grads.chains[i], &params.chains[i], two_lambda * reg_coef);
        }
        bpr_backward(&head.embedding, &final_loc, &final_margins, &|_| cfg.mu2, &mut d_embedding);
        add_embed_reg(&mut grads, params, &final_nodes, two_lambda * cfg.mu2);
        for (g, p) in grads.chains.iter_mut().zip(&params.chains) {
            add_transform_reg(g, p, two_lambda * cfg.mu2);
        }

        // head
        d_embedding /= 3.0;
        d_chain_sum += &d_embedding;
        for dr in &mut d_relation {
            *dr += &d_embedding;
        }
        for (i, c) in self.chains.iter().enumerate() {
            let steps = &head.steps[i];
            let mut d_steps: Vec<Array2<f64>> = vec![d_chain_sum.clone(); steps.len()];
            *d_steps.last_mut().expect("steps") += &d_last[i];
            let (d_first, d_t) = chain_backward(&params.chains[i], steps, &d_steps, head.user_rows);
            d_relation[c.first()] += &d_first;
            for (g, dt) in grads.chains[i].user.iter_mut().zip(&d_t.user) {
                *g += dt;
            }
            for (g, dt) in grads.chains[i].item.iter_mut().zip(&d_t.item) {
                *g += dt;
            }
        }
        let d_half = &d_embedding * 0.5;

        // propagation
        let n = self.num_nodes();
        let scatter = |rows_grad: &Array2<f64>| -> Array2<f64> {
            let mut full = Array2::zeros((n, d));
            for (k, &v) in head.rows.iter().enumerate() {
                full.row_mut(v).assign(&rows_grad.row(k));
            }
            full
        };
        let d_h = scatter(&d_half);
        let (d_base_loc, d_entries) = propagate_local_backward(&prop.local_adj.matrix, &prop.local_layers, &d_h);
        grads.patterns.local_logits =
            aggregate_local_backward(&self.pattern_index, &prop.local_adj, cfg.local_norm, &d_entries);
        let (d_base_glo, d_b) = propagate_global_backward(&prop.global_op, &prop.global_layers, &d_h);
        grads.patterns.global_logits =
            scale_columns_backward(self.pattern_index.counts(), &params.patterns.global_logits, &d_b);
        let mut d_base_rel = Array2::<f64>::zeros((n, d));
        for (adj, dr) in self.relation_adj.iter().zip(&d_relation) {
            d_base_rel += &propagate_summed(adj, &scatter(dr), cfg.layers);
        }
        let li = grads.table_index(LOCAL);
        grads.base[li] += &d_base_loc;
        let gi = grads.table_index(GLOBAL);
        grads.base[gi] += &d_base_glo;
        let ri = grads.table_index(RELATION);
        grads.base[ri] += &d_base_rel;

        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok((breakdown, Some(grads)))
    }
}

/// `d raw` for `w = n * softmax(mean_u LeakyReLU(pre[u]))` given `dL/dw = terms`.
fn batch_raw_backward(pre: &[Vec<f64>], terms: &[f64], slope: f64) -> Vec<f64> {
    let n = terms.len();
    let mut raw = vec![0.0; n];
    for row in pre {
        for (acc, &p) in raw.iter_mut().zip(row) {
            *acc += leaky_relu(p, slope);
        }
    }
    for v in &mut raw {
        *v /= pre.len() as f64;
    }
    let probs = softmax(&raw);
    softmax_backward(&probs, terms).into_iter().map(|g| g * n as f64).collect()
}

/// Per-user `w = n * softmax(LeakyReLU(pre))`; gradient on `pre` given `dL/dw = up`.
fn scaled_softmax_backward(pre: &[f64], up: &[f64], slope: f64) -> Vec<f64> {
    let n = pre.len() as f64;
    let acts: Vec<f64> = pre.iter().map(|&p| leaky_relu(p, slope)).collect();
    let probs = softmax(&acts);
    softmax_backward(&probs, up)
        .into_iter()
        .zip(pre)
        .map(|(g, &p)| g * n * leaky_relu_grad(p, slope))
        .collect()
}

fn column_means(rows: &[Vec<f64>], cols: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![1.0; cols];
    }
    let mut out = vec![0.0; cols];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows.len() as f64).collect()
}

fn add_embed_reg(grads: &mut ModelParams, params: &ModelParams, nodes: &[usize], coef: f64) {
    if coef == 0.0 {
        return;
    }
    for (g, p) in grads.base.iter_mut().zip(&params.base) {
        for &v in nodes {
            g.row_mut(v).scaled_add(coef, &p.row(v));
        }
    }
}

fn add_transform_reg(grads: &mut ChainTransforms, params: &ChainTransforms, coef: f64) {
    if coef == 0.0 {
        return;
    }
    for (g, p) in grads.user.iter_mut().zip(&params.user).chain(grads.item.iter_mut().zip(&params.item)) {
        g.scaled_add(coef, p);
    }
}

fn check_finite(
    b: &LossBreakdown,
    chains: &[RelationChain],
    schema: &RelationSchema,
    auxiliaries: &[usize],
) -> Result<()> {
    let bad = |v: f64| !v.is_finite();
    for (i, c) in chains.iter().enumerate() {
        if bad(b.chain_bpr[i]) {
            return Err(Error::NonFinite(format!("chain BPR of {}", c.label(schema))));
        }
        if bad(b.chain_reg[i]) {
            return Err(Error::NonFinite(format!("chain regularizer of {}", c.label(schema))));
        }
        if bad(b.chain_weights[i]) {
            return Err(Error::NonFinite(format!("chain weight of {}", c.label(schema))));
        }
    }
    for (k, &r) in auxiliaries.iter().enumerate() {
        if bad(b.contrastive[k]) {
            return Err(Error::NonFinite(format!("contrastive loss of {}", schema.name(r))));
        }
        if bad(b.relation_weights[k]) {
            return Err(Error::NonFinite(format!("relation weight of {}", schema.name(r))));
        }
    }
    if bad(b.final_bpr) {
        return Err(Error::NonFinite("final BPR".into()));
    }
    if bad(b.final_reg) {
        return Err(Error::NonFinite("final regularizer".into()));
    }
    if bad(b.total) {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(())
}
