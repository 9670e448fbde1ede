//! Multiplex bipartite graphs: schema, ingestion, persistence and splits.
//!
//! Node indexing is shared by every downstream module: users occupy
//! `[0, num_users)` and items `[num_users, num_users + num_items)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::sparse::Csr;

/// Pattern masks are `u32` bitsets and their count `2^|R| - 1` has to stay enumerable.
pub const MAX_RELATIONS: usize = 8;

const GRAPH_FORMAT: &str = "dcmgnn-graph-v1";

/// Relation names, the target relation and the canonical chain order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    relations: Vec<String>,
    target: usize,
    canonical_order: Vec<usize>,
}

impl RelationSchema {
    /// `canonical_order` defaults to `relations` with the target moved to the end.
    pub fn new<S: AsRef<str>>(
        relations: &[S],
        target: &str,
        canonical_order: Option<&[S]>,
    ) -> Result<Self> {
        let relations: Vec<String> = relations.iter().map(|s| s.as_ref().to_string()).collect();
        if relations.is_empty() || relations.len() > MAX_RELATIONS {
            return Err(Error::Schema(format!(
                "expected 1..={MAX_RELATIONS} relations, got {}",
                relations.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &relations {
            if r.is_empty() || r.contains(['\t', '\n', ',']) {
                return Err(Error::Schema(format!("invalid relation name `{r}`")));
            }
            if !seen.insert(r.as_str()) {
                return Err(Error::Schema(format!("duplicate relation `{r}`")));
            }
        }
        let index_of = |name: &str| {
            relations
                .iter()
                .position(|r| r == name)
                .ok_or_else(|| Error::Schema(format!("relation `{name}` not in schema")))
        };
        let target = index_of(target)?;
        let canonical_order = match canonical_order {
            Some(order) => order
                .iter()
                .map(|s| index_of(s.as_ref()))
                .collect::<Result<Vec<_>>>()?,
            None => (0..relations.len())
                .filter(|&r| r != target)
                .chain(std::iter::once(target))
                .collect(),
        };
        validate_permutation(&canonical_order, relations.len())?;
        if canonical_order.last() != Some(&target) {
            return Err(Error::Schema(format!(
                "target `{}` must be last in the canonical order",
                relations[target]
            )));
        }
        Ok(RelationSchema {
            relations,
            target,
            canonical_order,
        })
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn name(&self, relation: usize) -> &str {
        &self.relations[relation]
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn target_name(&self) -> &str {
        &self.relations[self.target]
    }

    pub fn canonical_order(&self) -> &[usize] {
        &self.canonical_order
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    /// Auxiliary relations in schema order.
    pub fn auxiliaries(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&r| r != self.target)
    }

    /// Resolves a chain-order override. Unlike the canonical order the target
    /// may sit anywhere, which is what the relation-order study needs.
    pub fn resolve_order<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        let order = names
            .iter()
            .map(|s| {
                self.index_of(s.as_ref())
                    .ok_or_else(|| Error::Schema(format!("relation `{}` not in schema", s.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        validate_permutation(&order, self.len())?;
        Ok(order)
    }
}

fn validate_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &r in order {
        if r >= n || seen[r] {
            return Err(Error::Schema("relation order is not a permutation".into()));
        }
        seen[r] = true;
    }
    if order.len() != n {
        return Err(Error::Schema(format!(
            "relation order lists {} relations, schema has {n}",
            order.len()
        )));
    }
    Ok(())
}

/// A user-item graph with one binary symmetric adjacency matrix per relation.
#[derive(Debug, Clone)]
pub struct MultiplexBipartiteGraph {
    schema: RelationSchema,
    num_users: usize,
    num_items: usize,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    /// Per relation: sorted, unique `(user, item)` pairs with item-local indices.
    edges: Vec<Vec<(usize, usize)>>,
    adjacency: Vec<Csr>,
}

impl PartialEq for MultiplexBipartiteGraph {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.user_ids == other.user_ids
            && self.item_ids == other.item_ids
            && self.edges == other.edges
    }
}

impl MultiplexBipartiteGraph {
    /// Builds a graph from per-relation `(user, item)` edge lists. Duplicates collapse.
    pub fn from_edges(
        schema: RelationSchema,
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        mut edges: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        if edges.len() != schema.len() {
            return Err(Error::Shape(format!(
                "{} edge lists for {} relations",
                edges.len(),
                schema.len()
            )));
        }
        let (num_users, num_items) = (user_ids.len(), item_ids.len());
        let n = num_users + num_items;
        let mut adjacency = Vec::with_capacity(edges.len());
        for list in edges.iter_mut() {
            if let Some(&(u, i)) = list.iter().find(|&&(u, i)| u >= num_users || i >= num_items) {
                return Err(Error::Shape(format!(
                    "edge ({u},{i}) outside {num_users} users x {num_items} items"
                )));
            }
            list.sort_unstable();
            list.dedup();
            adjacency.push(Csr::symmetric_binary(
                n,
                list.iter().map(|&(u, i)| (u, num_users + i)),
            ));
        }
        Ok(MultiplexBipartiteGraph {
            schema,
            num_users,
            num_items,
            user_ids,
            item_ids,
            edges,
            adjacency,
        })
    }

    /// Same node set, different edges.
    pub fn with_edges(&self, edges: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        Self::from_edges(
            self.schema.clone(),
            self.user_ids.clone(),
            self.item_ids.clone(),
            edges,
        )
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
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

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn edges(&self, relation: usize) -> &[(usize, usize)] {
        &self.edges[relation]
    }

    pub fn all_edges(&self) -> &[Vec<(usize, usize)>] {
        &self.edges
    }

    pub fn adjacency(&self, relation: usize) -> &Csr {
        &self.adjacency[relation]
    }

    pub fn has_edge(&self, relation: usize, user: usize, item: usize) -> bool {
        self.edges[relation].binary_search(&(user, item)).is_ok()
    }

    /// Number of neighbors of `node` (user or item index space) under `relation`.
    pub fn degree(&self, relation: usize, node: usize) -> usize {
        self.adjacency[relation].row_len(node)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Items each user interacts with under `relation`, sorted.
    pub fn items_by_user(&self, relation: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.edges[relation] {
            out[u].push(i);
        }
        out
    }

    /// Writes one edge list per relation plus a key-value metadata file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(path, e))
        };
        let mut meta = String::new();
        meta.push_str(&format!("format = {GRAPH_FORMAT}\n"));
        meta.push_str(&format!("num_users = {}\n", self.num_users));
        meta.push_str(&format!("num_items = {}\n", self.num_items));
        meta.push_str(&format!("relations = {}\n", self.schema.relations.join(",")));
        meta.push_str(&format!("target = {}\n", self.schema.target_name()));
        let order: Vec<&str> = self.schema.canonical_order.iter().map(|&r| self.schema.name(r)).collect();
        meta.push_str(&format!("canonical_order = {}\n", order.join(",")));
        for (r, list) in self.edges.iter().enumerate() {
            meta.push_str(&format!("edges.{} = {}\n", self.schema.name(r), list.len()));
        }
        write("meta.txt", meta)?;
        write("users.txt", lines(&self.user_ids))?;
        write("items.txt", lines(&self.item_ids))?;
        for (r, list) in self.edges.iter().enumerate() {
            let mut body = String::new();
            for &(u, i) in list {
                body.push_str(&self.user_ids[u]);
                body.push('\t');
                body.push_str(&self.item_ids[i]);
                body.push('\n');
            }
            write(&format!("edges_{r}.tsv"), body)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`MultiplexBipartiteGraph::save`].
    pub fn load_saved(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let meta: BTreeMap<String, String> = parse_key_values(&read("meta.txt")?)?.into_iter().collect();
        let get = |key: &str| {
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("graph metadata missing `{key}`")))
        };
        if get("format")? != GRAPH_FORMAT {
            return Err(Error::Schema(format!("unsupported graph format `{}`", get("format")?)));
        }
        let relations = split_list(&get("relations")?);
        let order = split_list(&get("canonical_order")?);
        let schema = RelationSchema::new(&relations, &get("target")?, Some(&order))?;
        let user_ids: Vec<String> = read("users.txt")?.lines().map(str::to_string).collect();
        let item_ids: Vec<String> = read("items.txt")?.lines().map(str::to_string).collect();
        let users: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let items: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let mut edges = Vec::with_capacity(schema.len());
        for r in 0..schema.len() {
            let body = read(&format!("edges_{r}.tsv"))?;
            let mut list = Vec::new();
            for (k, line) in body.lines().enumerate() {
                let mut fields = line.split('\t');
                let (Some(u), Some(i)) = (fields.next(), fields.next()) else {
                    return Err(Error::Parse { line: k + 1, message: "expected user<TAB>item".into() });
                };
                let u = *users.get(u).ok_or_else(|| Error::Parse { line: k + 1, message: format!("unknown user `{u}`") })?;
                let i = *items.get(i).ok_or_else(|| Error::Parse { line: k + 1, message: format!("unknown item `{i}`") })?;
                list.push((u, i));
            }
            edges.push(list);
        }
        Self::from_edges(schema, user_ids, item_ids, edges)
    }
}

fn lines(ids: &[String]) -> String {
    let mut s = String::new();
    for id in ids {
        s.push_str(id);
        s.push('\n');
    }
    s
}

pub(crate) fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

/// Loads a `user<TAB>item<TAB>relation` interaction file.
///
/// Ids are assigned densely in first-seen order. Fields after the relation
/// name (node attributes) are accepted and ignored.
pub fn load_interactions(path: &Path, schema: &RelationSchema) -> Result<MultiplexBipartiteGraph> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(file, schema).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_interactions<R: Read>(reader: R, schema: &RelationSchema) -> Result<MultiplexBipartiteGraph> {
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut edges = vec![Vec::new(); schema.len()];
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<interactions>", e))?;
        let lineno = k + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields[..3].iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected user<TAB>item<TAB>relation, got `{line}`"),
            });
        }
        let relation = schema.index_of(fields[2]).ok_or_else(|| Error::UnknownRelation {
            line: lineno,
            name: fields[2].to_string(),
        })?;
        let u = intern(&mut users, &mut user_ids, fields[0]);
        let i = intern(&mut items, &mut item_ids, fields[1]);
        edges[relation].push((u, i));
    }
    MultiplexBipartiteGraph::from_edges(schema.clone(), user_ids, item_ids, edges)
}

fn intern(map: &mut HashMap<String, usize>, ids: &mut Vec<String>, key: &str) -> usize {
    if let Some(&k) = map.get(key) {
        return k;
    }
    let k = ids.len();
    map.insert(key.to_string(), k);
    ids.push(key.to_string());
    k
}

/// Writes interactions in the ingestion format (relation order, then edge order).
pub fn write_interactions<W: Write>(graph: &MultiplexBipartiteGraph, mut out: W) -> std::io::Result<()> {
    for r in 0..graph.schema.len() {
        for &(u, i) in graph.edges(r) {
            writeln!(out, "{}\t{}\t{}", graph.user_ids[u], graph.item_ids[i], graph.schema.name(r))?;
        }
    }
    Ok(())
}

/// Train/test partition of the target relation. Auxiliary edges all train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub ratio: f64,
    pub seed: u64,
    /// Per relation, sorted.
    pub train_edges: Vec<Vec<(usize, usize)>>,
    /// Target relation only, sorted.
    pub test_edges: Vec<(usize, usize)>,
}

impl DatasetSplit {
    pub fn train_graph(&self, graph: &MultiplexBipartiteGraph) -> Result<MultiplexBipartiteGraph> {
        graph.with_edges(self.train_edges.clone())
    }

    pub fn test_items_by_user(&self, num_users: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_users];
        for &(u, i) in &self.test_edges {
            out[u].push(i);
        }
        out
    }

    /// Training edges per user summed over every relation.
    pub fn train_interaction_counts(&self, num_users: usize) -> Vec<usize> {
        let mut out = vec![0; num_users];
        for list in &self.train_edges {
            for &(u, _) in list {
                out[u] += 1;
            }
        }
        out
    }
}

/// Shuffles the target edges with the split stream and keeps the first
/// `round(ratio * n)` for training.
pub fn split_train_test(graph: &MultiplexBipartiteGraph, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let target = graph.schema.target();
    let mut target_edges = graph.edges(target).to_vec();
    if target_edges.is_empty() {
        return Err(Error::Split(format!(
            "no `{}` edges to split",
            graph.schema.target_name()
        )));
    }
    let n_train = (ratio * target_edges.len() as f64).round() as usize;
    let mut rng = rng::stream(seed, Stream::Split);
    target_edges.shuffle(&mut rng);
    let mut test = target_edges.split_off(n_train);
    target_edges.sort_unstable();
    test.sort_unstable();
    let mut train_edges = graph.all_edges().to_vec();
    train_edges[target] = target_edges;
    Ok(DatasetSplit {
        ratio,
        seed,
        train_edges,
        test_edges: test,
    })
}
