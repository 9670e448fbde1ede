//! Full-ranking top-K evaluation and the interaction-sparsity breakdown.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DatasetSplit, MultiplexBipartiteGraph};
use crate::model::{Model, ModelParams};

pub const DEFAULT_KS: [usize; 4] = [5, 10, 20, 40];

/// Training-interaction-count buckets. The last, open-ended bucket catches
/// users beyond 60 so that the groups partition every evaluated user.
pub const SPARSITY_GROUPS: [(usize, Option<usize>); 7] = [
    (0, Some(4)),
    (4, Some(5)),
    (5, Some(6)),
    (6, Some(7)),
    (7, Some(10)),
    (10, Some(60)),
    (60, None),
];

/// What evaluation needs from a split, precomputed once.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted target-relation training items per user; never ranked.
    pub exclude: Vec<Vec<usize>>,
    /// Held-out target items per user.
    pub test: Vec<Vec<usize>>,
    /// Training edges per user across all relations.
    pub interaction_counts: Vec<usize>,
}

impl EvalData {
    pub fn new(graph: &MultiplexBipartiteGraph, split: &DatasetSplit) -> Self {
        let n = graph.num_users();
        let target = graph.schema().target();
        let mut exclude = vec![Vec::new(); n];
        for &(u, i) in &split.train_edges[target] {
            exclude[u].push(i);
        }
        for e in &mut exclude {
            e.sort_unstable();
        }
        EvalData {
            num_users: n,
            num_items: graph.num_items(),
            exclude,
            test: split.test_items_by_user(n),
            interaction_counts: split.train_interaction_counts(n),
        }
    }

    pub fn evaluated_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_users).filter(|&u| !self.test[u].is_empty())
    }
}

/// Descending score, then ascending item id.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// All items except `exclude`, best first.
pub fn rank_items(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    top_k(scores, exclude, scores.len())
}

/// The first `k` entries of [`rank_items`] without sorting the whole catalog.
pub fn top_k(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| exclude.binary_search(i).is_err()).collect();
    let k = k.min(items.len());
    if k == 0 {
        return Vec::new();
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        items.truncate(k);
    }
    items.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    items
}

/// `|top-k ∩ test| / |test|`.
pub fn recall_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    assert!(!test.is_empty(), "empty test set");
    let hits = ranked.iter().take(k).filter(|i| test.contains(i)).count();
    hits as f64 / test.len() as f64
}

/// Binary-gain DCG@k over the ideal DCG of `min(|test|, k)` hits.
pub fn ndcg_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    assert!(!test.is_empty(), "empty test set");
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(pos, _)| gain(pos + 1))
        .sum();
    let ideal: f64 = (1..=test.len().min(k)).map(gain).sum();
    dcg / ideal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    /// Top `max(ks)` items.
    pub ranked: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub ks: Vec<usize>,
    pub users: Vec<UserMetrics>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl RankingResult {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.ndcg[p])
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("ks must be nonempty and >= 1, got {ks:?}")));
    }
    Ok(())
}

/// Ranks every item for every user with a test item, scoring by the dot
/// product of final embeddings (users in rows `[0, U)`, items after).
pub fn evaluate_embeddings(embeddings: &Array2<f64>, data: &EvalData, ks: &[usize]) -> Result<RankingResult> {
    check_ks(ks)?;
    let (u, i) = (data.num_users, data.num_items);
    if embeddings.nrows() != u + i {
        return Err(Error::Shape(format!("{} embedding rows for {} nodes", embeddings.nrows(), u + i)));
    }
    let items = embeddings.slice(s![u.., ..]);
    let kmax = *ks.iter().max().expect("nonempty");
    let users: Vec<usize> = data.evaluated_users().collect();
    let per_user: Vec<UserMetrics> = users
        .par_iter()
        .map(|&user| {
            let eu: ArrayView1<f64> = embeddings.row(user);
            let scores = items.dot(&eu).to_vec();
            let ranked = top_k(&scores, &data.exclude[user], kmax);
            let test = &data.test[user];
            UserMetrics {
                user,
                recall: ks.iter().map(|&k| recall_at_k(&ranked, test, k)).collect(),
                ndcg: ks.iter().map(|&k| ndcg_at_k(&ranked, test, k)).collect(),
                ranked,
            }
        })
        .collect();
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| -> f64 {
        if per_user.is_empty() {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / per_user.len() as f64
        }
    };
    let recall = (0..ks.len()).map(|p| mean(&|m| m.recall[p])).collect();
    let ndcg = (0..ks.len()).map(|p| mean(&|m| m.ndcg[p])).collect();
    Ok(RankingResult {
        ks: ks.to_vec(),
        users: per_user,
        recall,
        ndcg,
    })
}

pub fn evaluate(model: &Model, params: &ModelParams, data: &EvalData, ks: &[usize]) -> Result<RankingResult> {
    evaluate_embeddings(&model.final_embeddings(params)?, data, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub label: String,
    pub users: usize,
    pub k: usize,
    /// Absent for empty groups.
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
}

pub fn group_label(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(hi) => format!("[{lo},{hi})"),
        None => format!("[{lo},inf)"),
    }
}

/// Per-group mean Recall@k / NDCG@k, bucketing users by training interactions.
pub fn sparsity_groups(result: &RankingResult, interaction_counts: &[usize], k: usize) -> Result<Vec<GroupMetrics>> {
    let p = result
        .ks
        .iter()
        .position(|&x| x == k)
        .ok_or_else(|| Error::Config(format!("k = {k} was not evaluated")))?;
    Ok(SPARSITY_GROUPS
        .iter()
        .map(|&(lo, hi)| {
            let members: Vec<&UserMetrics> = result
                .users
                .iter()
                .filter(|m| {
                    let c = interaction_counts[m.user];
                    c >= lo && hi.is_none_or(|h| c < h)
                })
                .collect();
            let n = members.len();
            let mean = |f: &dyn Fn(&UserMetrics) -> f64| (n > 0).then(|| members.iter().map(|m| f(m)).sum::<f64>() / n as f64);
            GroupMetrics {
                label: group_label(lo, hi),
                users: n,
                k,
                recall: mean(&|m| m.recall[p]),
                ndcg: mean(&|m| m.ndcg[p]),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub probe_loss: Option<f64>,
    pub metrics: Vec<MetricAtK>,
    pub groups: Vec<GroupMetrics>,
}

impl MetricsRecord {
    pub fn new(epoch: usize, result: &RankingResult, groups: Vec<GroupMetrics>) -> Self {
        MetricsRecord {
            epoch,
            loss: None,
            probe_loss: None,
            metrics: result
                .ks
                .iter()
                .zip(result.recall.iter().zip(&result.ndcg))
                .map(|(&k, (&recall, &ndcg))| MetricAtK { k, recall, ndcg })
                .collect(),
            groups,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub const CSV_HEADER: &'static str = "epoch,metric,k,value,group";

    /// Flat rows `epoch,metric,k,value,group`; empty groups are skipped.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        for m in &self.metrics {
            rows.push(format!("{},recall,{},{},all", self.epoch, m.k, m.recall));
            rows.push(format!("{},ndcg,{},{},all", self.epoch, m.k, m.ndcg));
        }
        for g in &self.groups {
            if let (Some(r), Some(n)) = (g.recall, g.ndcg) {
                rows.push(format!("{},recall,{},{},{}", self.epoch, g.k, r, g.label));
                rows.push(format!("{},ndcg,{},{},{}", self.epoch, g.k, n, g.label));
            }
        }
        rows
    }
}
