//! Relation chains: ordered relation sequences derived from behavior
//! patterns that contain the target relation, each step carried forward by
//! learnable user and item transforms.

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RelationSchema;
use crate::patterns::{enumerate_patterns, PatternMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationChain {
    /// Schema relation indices in chain order.
    pub relations: Vec<usize>,
    /// The behavior pattern this chain was derived from.
    pub mask: PatternMask,
}

impl RelationChain {
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    /// Number of transforms per side.
    pub fn steps(&self) -> usize {
        self.relations.len() - 1
    }

    pub fn first(&self) -> usize {
        self.relations[0]
    }

    pub fn label(&self, schema: &RelationSchema) -> String {
        self.relations
            .iter()
            .map(|&r| schema.name(r))
            .collect::<Vec<_>>()
            .join("->")
    }
}

/// One chain per pattern that holds the target and at least one other
/// relation, ordered by the schema's canonical order.
pub fn enumerate_chains(schema: &RelationSchema) -> Vec<RelationChain> {
    enumerate_chains_with_order(schema, schema.canonical_order())
}

/// Like [`enumerate_chains`] with an explicit relation order. The order only
/// changes the sequence inside each chain, never which masks qualify.
pub fn enumerate_chains_with_order(schema: &RelationSchema, order: &[usize]) -> Vec<RelationChain> {
    let target = schema.target();
    enumerate_patterns(schema)
        .into_iter()
        .filter(|m| m.contains(target) && m.count() >= 2)
        .map(|mask| RelationChain {
            relations: order.iter().copied().filter(|&r| mask.contains(r)).collect(),
            mask,
        })
        .collect()
}

/// Transforms `W^{j}` from step `j` to `j+1`, separately for users and items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTransforms {
    pub user: Vec<Array2<f64>>,
    pub item: Vec<Array2<f64>>,
}

impl ChainTransforms {
    pub fn identity(steps: usize, dim: usize) -> Self {
        ChainTransforms {
            user: vec![Array2::eye(dim); steps],
            item: vec![Array2::eye(dim); steps],
        }
    }

    pub fn zeros(steps: usize, dim: usize) -> Self {
        ChainTransforms {
            user: vec![Array2::zeros((dim, dim)); steps],
            item: vec![Array2::zeros((dim, dim)); steps],
        }
    }

    /// Xavier-uniform initialization.
    pub fn xavier<R: Rng>(steps: usize, dim: usize, rng: &mut R) -> Self {
        let mut draw = || xavier_uniform(dim, dim, rng);
        let user = (0..steps).map(|_| draw()).collect();
        let item = (0..steps).map(|_| draw()).collect();
        ChainTransforms { user, item }
    }

    pub fn steps(&self) -> usize {
        self.user.len()
    }
}

pub fn xavier_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Step tables of one chain. `first` holds the relation-specific embedding
/// of the chain's first relation for a set of node rows, of which the first
/// `user_rows` are users and the rest items.
pub fn chain_forward(transforms: &ChainTransforms, first: &Array2<f64>, user_rows: usize) -> Result<Vec<Array2<f64>>> {
    let dim = first.ncols();
    for w in transforms.user.iter().chain(&transforms.item) {
        if w.dim() != (dim, dim) {
            return Err(Error::Shape(format!("transform {:?} for embedding dim {dim}", w.dim())));
        }
    }
    if user_rows > first.nrows() {
        return Err(Error::Shape(format!("{user_rows} user rows of {}", first.nrows())));
    }
    let mut steps = Vec::with_capacity(transforms.steps() + 1);
    steps.push(first.clone());
    for j in 0..transforms.steps() {
        let prev = &steps[j];
        let mut next = Array2::zeros(prev.raw_dim());
        next.slice_mut(s![..user_rows, ..])
            .assign(&prev.slice(s![..user_rows, ..]).dot(&transforms.user[j].t()));
        next.slice_mut(s![user_rows.., ..])
            .assign(&prev.slice(s![user_rows.., ..]).dot(&transforms.item[j].t()));
        steps.push(next);
    }
    Ok(steps)
}

/// Reverse pass of [`chain_forward`]. `d_steps[j]` is the gradient arriving
/// directly at step `j`. Returns the gradient on `first` and on the transforms.
pub fn chain_backward(
    transforms: &ChainTransforms,
    steps: &[Array2<f64>],
    d_steps: &[Array2<f64>],
    user_rows: usize,
) -> (Array2<f64>, ChainTransforms) {
    let dim = steps[0].ncols();
    let mut grads = ChainTransforms::zeros(transforms.steps(), dim);
    let mut g = d_steps[steps.len() - 1].clone();
    for j in (0..transforms.steps()).rev() {
        let prev = &steps[j];
        let (gu, gi) = (g.slice(s![..user_rows, ..]), g.slice(s![user_rows.., ..]));
        let (pu, pi) = (prev.slice(s![..user_rows, ..]), prev.slice(s![user_rows.., ..]));
        grads.user[j] = gu.t().dot(&pu);
        grads.item[j] = gi.t().dot(&pi);
        let mut back = d_steps[j].clone();
        {
            let mut bu = back.slice_mut(s![..user_rows, ..]);
            bu += &gu.dot(&transforms.user[j]);
        }
        {
            let mut bi = back.slice_mut(s![user_rows.., ..]);
            bi += &gi.dot(&transforms.item[j]);
        }
        g = back;
    }
    (g, grads)
}

/// Sum of every step table across every chain.
pub fn chain_embedding<'a>(steps: impl IntoIterator<Item = &'a Array2<f64>>, shape: (usize, usize)) -> Array2<f64> {
    let mut acc = Array2::zeros(shape);
    for t in steps {
        acc += t;
    }
    acc
}

/// Elementwise mean of the pattern, multi-relation and chain views.
pub fn final_embedding(ebp: &Array2<f64>, relations: &Array2<f64>, chains: &Array2<f64>) -> Result<Array2<f64>> {
    if ebp.dim() != relations.dim() || ebp.dim() != chains.dim() {
        return Err(Error::Shape(format!(
            "final views {:?}, {:?}, {:?}",
            ebp.dim(),
            relations.dim(),
            chains.dim()
        )));
    }
    Ok((ebp + relations + chains) / 3.0)
}
