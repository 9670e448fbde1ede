//! Synthetic multiplex data with planted cascade preferences.
//!
//! Users and items belong to communities. Each user views items mostly from
//! its own community, carts a subset of its views, and buys a subset of its
//! carts. With cascade strength `s`, each buy comes from the user's carts
//! with probability `s` and otherwise from items the user never viewed.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MultiplexBipartiteGraph, RelationSchema};
use crate::rng::{stream, Stream};

pub const RELATIONS: [&str; 3] = ["view", "cart", "buy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub communities: usize,
    pub views_per_user: usize,
    pub carts_per_user: usize,
    pub buys_per_user: usize,
    pub cascade: f64,
    /// Probability that a view stays inside the user's community.
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 500,
            items: 500,
            communities: 50,
            views_per_user: 8,
            carts_per_user: 5,
            buys_per_user: 4,
            cascade: 1.0,
            affinity: 0.98,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.users == 0 || self.items == 0 || self.communities == 0 {
            return bad("users, items and communities must be >= 1".into());
        }
        if self.communities > self.items {
            return bad("more communities than items".into());
        }
        if !(self.buys_per_user <= self.carts_per_user && self.carts_per_user <= self.views_per_user) {
            return bad("need buys <= carts <= views per user".into());
        }
        if self.views_per_user + self.buys_per_user > self.items {
            return bad("views plus buys per user exceed the catalog".into());
        }
        if !(0.0..=1.0).contains(&self.cascade) || !(0.0..=1.0).contains(&self.affinity) {
            return bad("cascade and affinity must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub relations: Vec<String>,
    pub target: String,
    pub edges: Vec<usize>,
    /// Buys drawn from the user's carts.
    pub cascade_buys: usize,
    /// Buys drawn from items the user never viewed.
    pub random_buys: usize,
    pub user_community: Vec<usize>,
    pub item_community: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// `(user, item, relation index into RELATIONS)`, grouped by user.
    pub interactions: Vec<(usize, usize, usize)>,
    pub manifest: Manifest,
}

fn pick<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    sample(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Synth);
    let c = config.communities;
    let user_community: Vec<usize> = (0..config.users).map(|u| u % c).collect();
    let item_community: Vec<usize> = (0..config.items).map(|i| i % c).collect();
    let members: Vec<Vec<usize>> = (0..c).map(|k| (k..config.items).step_by(c).collect()).collect();
    let mut interactions = Vec::new();
    let (mut cascade_buys, mut random_buys) = (0, 0);
    for u in 0..config.users {
        let home = &members[user_community[u]];
        let mut views: Vec<usize> = Vec::with_capacity(config.views_per_user);
        while views.len() < config.views_per_user {
            let item = if rng.gen_bool(config.affinity) {
                home[rng.gen_range(0..home.len())]
            } else {
                rng.gen_range(0..config.items)
            };
            if !views.contains(&item) {
                views.push(item);
            }
        }
        let carts = pick(&views, config.carts_per_user, &mut rng);
        let mut buys = Vec::with_capacity(config.buys_per_user);
        let mut cart_pool = carts.clone();
        for _ in 0..config.buys_per_user {
            if rng.gen_bool(config.cascade) {
                let k = rng.gen_range(0..cart_pool.len());
                buys.push(cart_pool.swap_remove(k));
                cascade_buys += 1;
            } else {
                loop {
                    let item = rng.gen_range(0..config.items);
                    if !views.contains(&item) && !buys.contains(&item) {
                        buys.push(item);
                        break;
                    }
                }
                random_buys += 1;
            }
        }
        for (r, list) in [&views, &carts, &buys].into_iter().enumerate() {
            interactions.extend(list.iter().map(|&i| (u, i, r)));
        }
    }
    let mut edges = vec![0; RELATIONS.len()];
    for &(_, _, r) in &interactions {
        edges[r] += 1;
    }
    Ok(SynthData {
        interactions,
        manifest: Manifest {
            config: config.clone(),
            relations: RELATIONS.iter().map(|s| s.to_string()).collect(),
            target: "buy".into(),
            edges,
            cascade_buys,
            random_buys,
            user_community,
            item_community,
        },
    })
}

impl SynthData {
    /// The generated interactions as a graph with ids `u<k>` / `i<k>` at index `k`.
    pub fn graph(&self) -> Result<MultiplexBipartiteGraph> {
        let schema = RelationSchema::new(&RELATIONS, "buy", None)?;
        let mut edges = vec![Vec::new(); RELATIONS.len()];
        for &(u, i, r) in &self.interactions {
            edges[r].push((u, i));
        }
        let c = &self.manifest.config;
        MultiplexBipartiteGraph::from_edges(
            schema,
            (0..c.users).map(|k| format!("u{k}")).collect(),
            (0..c.items).map(|k| format!("i{k}")).collect(),
            edges,
        )
    }

    /// `u<k>\ti<k>\t<relation>` lines.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for &(u, i, r) in &self.interactions {
            writeln!(out, "u{u}\ti{i}\t{}", RELATIONS[r])?;
        }
        Ok(())
    }

    /// Writes `interactions.tsv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("interactions.tsv");
        let mut body = Vec::new();
        self.write_tsv(&mut body).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
