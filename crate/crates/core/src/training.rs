//! Negative sampling, BPR, Adam and the epoch loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, sparsity_groups, EvalData, MetricsRecord, DEFAULT_KS};
use crate::graph::MultiplexBipartiteGraph;
use crate::math::softplus;
use crate::model::{LossBreakdown, Model, ModelConfig, ModelParams};
use crate::rng::{stream, Stream};

/// `(user, positive item, negative item)` with item-local indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    /// Target-relation triples for the final-embedding loss.
    pub final_triples: Vec<Triple>,
    /// One list per chain, positives drawn from the chain's pattern.
    pub chain_triples: Vec<Vec<Triple>>,
    /// Sorted unique users of `final_triples`; the contrastive batch.
    pub users: Vec<usize>,
}

impl TrainBatch {
    pub fn new(final_triples: Vec<Triple>, chain_triples: Vec<Vec<Triple>>) -> Self {
        let mut users: Vec<usize> = final_triples.iter().map(|t| t.user).collect();
        users.sort_unstable();
        users.dedup();
        TrainBatch {
            final_triples,
            chain_triples,
            users,
        }
    }
}

/// `sum -ln sigmoid(pos - neg) + lambda * reg_norm_sq`.
pub fn bpr_loss(scores_pos: &[f64], scores_neg: &[f64], reg_norm_sq: f64, lambda: f64) -> Result<f64> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::Shape(format!("{} positive vs {} negative scores", scores_pos.len(), scores_neg.len())));
    }
    let data: f64 = scores_pos.iter().zip(scores_neg).map(|(p, n)| softplus(n - p)).sum();
    Ok(data + lambda * reg_norm_sq)
}

const REJECTION_TRIES: usize = 100;

/// Uniform item outside the sorted `positives`: rejection sampling first,
/// then a scan over the remaining items.
pub fn sample_negative<R: Rng>(positives: &[usize], num_items: usize, rng: &mut R) -> Result<usize> {
    if positives.len() >= num_items {
        return Err(Error::Sampling(format!("user interacted with all {num_items} items")));
    }
    for _ in 0..REJECTION_TRIES {
        let i = rng.gen_range(0..num_items);
        if positives.binary_search(&i).is_err() {
            return Ok(i);
        }
    }
    let free: Vec<usize> = (0..num_items).filter(|i| positives.binary_search(i).is_err()).collect();
    Ok(free[rng.gen_range(0..free.len())])
}

/// Where a negative must avoid observed interactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    Target,
    Chain(usize),
}

/// Per-user positive sets for the target relation and every chain pattern.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    num_items: usize,
    target: Vec<Vec<usize>>,
    chains: Vec<Vec<Vec<usize>>>,
}

impl NegativeSampler {
    pub fn new(model: &Model, train: &MultiplexBipartiteGraph) -> Self {
        let by_user = |edges: &[(usize, usize)]| {
            let mut out = vec![Vec::new(); train.num_users()];
            for &(u, i) in edges {
                out[u].push(i);
            }
            for list in &mut out {
                list.sort_unstable();
            }
            out
        };
        NegativeSampler {
            num_items: train.num_items(),
            target: by_user(train.edges(train.schema().target())),
            chains: (0..model.chains().len()).map(|c| by_user(model.chain_positives(c))).collect(),
        }
    }

    pub fn positives(&self, user: usize, context: Context) -> &[usize] {
        match context {
            Context::Target => &self.target[user],
            Context::Chain(c) => &self.chains[c][user],
        }
    }

    pub fn sample<R: Rng>(&self, user: usize, context: Context, rng: &mut R) -> Result<usize> {
        let pos = self.positives(user, context);
        if pos.is_empty() {
            return Err(Error::Sampling(format!("user {user} has no positives in {context:?}")));
        }
        sample_negative(pos, self.num_items, rng)
    }
}

/// Batches for one epoch: the target training edges shuffled and chunked,
/// each chunk paired with as many chain triples per chain.
pub fn epoch_batches<R: Rng>(
    model: &Model,
    train: &MultiplexBipartiteGraph,
    sampler: &NegativeSampler,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainBatch>> {
    let mut edges = train.edges(train.schema().target()).to_vec();
    edges.shuffle(rng);
    edges
        .chunks(batch_size)
        .map(|chunk| make_batch(model, sampler, chunk, batch_size, rng))
        .collect()
}

fn make_batch<R: Rng>(
    model: &Model,
    sampler: &NegativeSampler,
    chunk: &[(usize, usize)],
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let final_triples = chunk
        .iter()
        .map(|&(user, pos)| {
            let neg = sampler.sample(user, Context::Target, rng)?;
            Ok(Triple { user, pos, neg })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut chain_triples = Vec::with_capacity(model.chains().len());
    for c in 0..model.chains().len() {
        let positives = model.chain_positives(c);
        let mut triples = Vec::new();
        if !positives.is_empty() {
            for _ in 0..batch_size {
                let (user, pos) = positives[rng.gen_range(0..positives.len())];
                let neg = sampler.sample(user, Context::Chain(c), rng)?;
                triples.push(Triple { user, pos, neg });
            }
        }
        chain_triples.push(triples);
    }
    Ok(TrainBatch::new(final_triples, chain_triples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Aborts before touching `params` if any
/// gradient is non-finite.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    let grads = grads.tensors();
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    if grads.len() != state.m.len() {
        return Err(Error::Shape("optimizer state does not match the parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(&grads).zip(&mut state.m).zip(&mut state.v) {
        for k in 0..p.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after the update")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many epochs (0 disables evaluation).
    pub eval_every: usize,
    /// Stop after this many epochs without a better R@10 (0 disables).
    pub patience: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Target triples in the fixed probe batch.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            eval_every: 1,
            patience: 20,
            seed: 42,
            ks: DEFAULT_KS.to_vec(),
            probe_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config(format!("ks must be nonempty and >= 1, got {:?}", self.ks)));
        }
        Ok(())
    }

    /// The k tracked for early stopping and the sparsity table.
    pub fn primary_k(&self) -> usize {
        if self.ks.contains(&10) {
            10
        } else {
            self.ks[0]
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub best_epoch: Option<usize>,
    pub best_recall: Option<f64>,
    pub best_params: Option<ModelParams>,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        let params = model.init_params(seed);
        TrainState {
            epoch: 0,
            adam: AdamState::new(&params),
            params,
            rng: stream(seed, Stream::Negatives),
            best_epoch: None,
            best_recall: None,
            best_params: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Objective on a fixed batch drawn once per run; flat when nothing learns.
    pub probe_loss: f64,
    pub breakdown: LossBreakdown,
    pub metrics: Option<MetricsRecord>,
}

/// A fixed batch drawn from its own stream so the probe never perturbs training draws.
pub fn probe_batch(
    model: &Model,
    train: &MultiplexBipartiteGraph,
    sampler: &NegativeSampler,
    size: usize,
    seed: u64,
) -> Result<TrainBatch> {
    let mut rng = stream(seed, Stream::Probe);
    let mut edges = train.edges(train.schema().target()).to_vec();
    edges.shuffle(&mut rng);
    edges.truncate(size.max(1));
    make_batch(model, sampler, &edges, edges.len(), &mut rng)
}

/// Runs epochs `state.epoch + 1 ..= config.epochs`. `on_epoch` sees every
/// finished epoch with the state after it, e.g. to log or checkpoint.
pub fn train(
    model: &Model,
    train_graph: &MultiplexBipartiteGraph,
    eval: &EvalData,
    config: &TrainConfig,
    state: &mut TrainState,
    on_epoch: &mut dyn FnMut(&EpochRecord, &TrainState) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    model.check_params(&state.params)?;
    if train_graph.edges(train_graph.schema().target()).is_empty() {
        return Err(Error::Split("no target training edges".into()));
    }
    let sampler = NegativeSampler::new(model, train_graph);
    let probe = probe_batch(model, train_graph, &sampler, config.probe_size, config.seed)?;
    let k = config.primary_k();
    let mut history = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let batches = epoch_batches(model, train_graph, &sampler, config.batch_size, &mut state.rng)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let (loss, grads) = model.objective_and_grad(&state.params, batch)?;
            loss_sum += loss.total;
            adam_step(&mut state.params, &grads, &mut state.adam, config.lr)?;
        }
        let breakdown = model.objective(&state.params, &probe)?;
        let mut record = EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            probe_loss: breakdown.total,
            breakdown,
            metrics: None,
        };
        state.epoch = epoch;
        let mut stop = false;
        if config.eval_every > 0 && (epoch.is_multiple_of(config.eval_every) || epoch == config.epochs) {
            let result = evaluate(model, &state.params, eval, &config.ks)?;
            let groups = sparsity_groups(&result, &eval.interaction_counts, k)?;
            let mut metrics = MetricsRecord::new(epoch, &result, groups);
            metrics.loss = Some(record.mean_loss);
            metrics.probe_loss = Some(record.probe_loss);
            let recall = result.recall_at(k).expect("primary k evaluated");
            if state.best_recall.is_none_or(|b| recall > b) {
                state.best_recall = Some(recall);
                state.best_epoch = Some(epoch);
                state.best_params = Some(state.params.clone());
            }
            if config.patience > 0 && state.best_epoch.is_some_and(|b| epoch - b >= config.patience) {
                stop = true;
            }
            record.metrics = Some(metrics);
        }
        log::info!(
            "epoch {epoch}: loss {:.6} probe {:.6}{}",
            record.mean_loss,
            record.probe_loss,
            record
                .metrics
                .as_ref()
                .map(|m| m
                    .metrics
                    .iter()
                    .map(|x| format!(" R@{}={:.4} N@{}={:.4}", x.k, x.recall, x.k, x.ndcg))
                    .collect::<String>())
                .unwrap_or_default()
        );
        on_epoch(&record, state)?;
        history.push(record);
        if stop {
            log::info!("early stop at epoch {epoch}: best R@{k} at epoch {:?}", state.best_epoch);
            break;
        }
    }
    Ok(history)
}
