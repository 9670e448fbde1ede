//! Relation-based InfoNCE and the relation-chain-aware weighting encoders.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::RelationChain;
use crate::error::{Error, Result};
use crate::math::{leaky_relu, log_sum_exp, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Scale applied to the duplicated loss block of chain features.
    pub mu: f64,
    pub leaky_slope: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            mu: 1.0,
            leaky_slope: 0.01,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope must lie in (0,1), got {}", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Scalar projection `LeakyReLU(F . w + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl EncoderParams {
    pub fn zeros(len: usize) -> Self {
        EncoderParams {
            weights: vec![0.0; len],
            bias: 0.0,
        }
    }

    /// Xavier-uniform projection to one output, zero bias.
    pub fn xavier<R: Rng>(len: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (len + 1) as f64).sqrt();
        EncoderParams {
            weights: (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
            bias: 0.0,
        }
    }
}

/// Cosine similarities `cos(anchor_a, candidate_b)` with their softmax over `b`.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub per_user: Vec<f64>,
    pub total: f64,
    /// Rows with zero norm, whose similarities were taken as 0.
    pub zero_norm: usize,
    cos: Array2<f64>,
    probs: Array2<f64>,
    anchor_norm: Vec<f64>,
    candidate_norm: Vec<f64>,
    tau: f64,
}

impl InfoNce {
    /// Row `a` of `anchor` is positive with row `a` of `candidates` and
    /// negative with every other candidate row.
    pub fn forward(anchor: &Array2<f64>, candidates: &Array2<f64>, tau: f64) -> Result<Self> {
        if anchor.dim() != candidates.dim() {
            return Err(Error::Shape(format!("{:?} vs {:?}", anchor.dim(), candidates.dim())));
        }
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {tau}")));
        }
        let n = anchor.nrows();
        let norms = |m: &Array2<f64>| -> Vec<f64> { m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
        let anchor_norm = norms(anchor);
        let candidate_norm = norms(candidates);
        let zero_norm = anchor_norm.iter().chain(&candidate_norm).filter(|&&x| x == 0.0).count();
        let mut cos = anchor.dot(&candidates.t());
        for ((a, b), v) in cos.indexed_iter_mut() {
            let denom = anchor_norm[a] * candidate_norm[b];
            *v = if denom > 0.0 { *v / denom } else { 0.0 };
        }
        let mut probs = Array2::zeros((n, n));
        let mut per_user = Vec::with_capacity(n);
        for a in 0..n {
            let logits: Vec<f64> = cos.row(a).iter().map(|c| c / tau).collect();
            per_user.push(log_sum_exp(&logits) - logits[a]);
            for (b, p) in softmax(&logits).into_iter().enumerate() {
                probs[[a, b]] = p;
            }
        }
        let total = per_user.iter().sum();
        Ok(InfoNce {
            per_user,
            total,
            zero_norm,
            cos,
            probs,
            anchor_norm,
            candidate_norm,
            tau,
        })
    }

    /// Gradients on `(anchor, candidates)` given `upstream[a] = dL/d per_user[a]`.
    pub fn backward(
        &self,
        anchor: &Array2<f64>,
        candidates: &Array2<f64>,
        upstream: &[f64],
    ) -> (Array2<f64>, Array2<f64>) {
        let n = anchor.nrows();
        let mut d_anchor = Array2::zeros(anchor.raw_dim());
        let mut d_cand = Array2::zeros(candidates.raw_dim());
        #[allow(clippy::needless_range_loop)]
        for a in 0..n {
            let na = self.anchor_norm[a];
            if na == 0.0 || upstream[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                let nb = self.candidate_norm[b];
                if nb == 0.0 {
                    continue;
                }
                let delta = if a == b { 1.0 } else { 0.0 };
                let d_cos = upstream[a] * (self.probs[[a, b]] - delta) / self.tau;
                if d_cos == 0.0 {
                    continue;
                }
                let c = self.cos[[a, b]];
                let x = anchor.row(a);
                let y = candidates.row(b);
                let inv = 1.0 / (na * nb);
                let mut da = d_anchor.row_mut(a);
                da.scaled_add(d_cos * inv, &y);
                da.scaled_add(-d_cos * c / (na * na), &x);
                let mut db = d_cand.row_mut(b);
                db.scaled_add(d_cos * inv, &x);
                db.scaled_add(-d_cos * c / (nb * nb), &y);
            }
        }
        (d_anchor, d_cand)
    }
}

/// Relation InfoNCE over a user batch: `e_r` supplies anchors and `e_r2`
/// the positives (same user) and negatives (other users).
pub fn infonce_loss(e_r: &Array2<f64>, e_r2: &Array2<f64>, users: &[usize], tau: f64) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Shape("empty user batch".into()));
    }
    let anchor = e_r.select(ndarray::Axis(0), users);
    let cand = e_r2.select(ndarray::Axis(0), users);
    Ok(InfoNce::forward(&anchor, &cand, tau)?.total)
}

/// `[mu * dup(sum of the chain's auxiliary losses)] ++ e_c ++ e_final`.
/// `rcl_losses` is indexed by relation; the target's entry is never read.
pub fn chain_knowledge(
    chain: &RelationChain,
    target: usize,
    rcl_losses: &[f64],
    e_c_row: &[f64],
    e_final_row: &[f64],
    mu: f64,
) -> Vec<f64> {
    let sum = chain_loss_sum(chain, target, rcl_losses);
    let d = e_c_row.len();
    let mut out = Vec::with_capacity(3 * d);
    out.extend(std::iter::repeat_n(mu * sum, d));
    out.extend_from_slice(e_c_row);
    out.extend_from_slice(e_final_row);
    out
}

pub fn chain_loss_sum(chain: &RelationChain, target: usize, rcl_losses: &[f64]) -> f64 {
    chain
        .relations
        .iter()
        .filter(|&&r| r != target)
        .map(|&r| rcl_losses[r])
        .sum()
}

/// `loss * (e_rel ++ e_final)`.
pub fn relation_knowledge(
    relation: usize,
    target: usize,
    rcl_loss: f64,
    e_rel_row: &[f64],
    e_final_row: &[f64],
) -> Result<Vec<f64>> {
    if relation == target {
        return Err(Error::Config("relation knowledge is undefined for the target relation".into()));
    }
    Ok(e_rel_row
        .iter()
        .chain(e_final_row)
        .map(|v| rcl_loss * v)
        .collect())
}

pub fn encode_weight(features: &[f64], params: &EncoderParams, leaky_slope: f64) -> Result<f64> {
    if features.len() != params.weights.len() {
        return Err(Error::Shape(format!(
            "{} features for a {}-wide projection",
            features.len(),
            params.weights.len()
        )));
    }
    Ok(leaky_relu(crate::math::dot(features, &params.weights) + params.bias, leaky_slope))
}

/// Softmax scaled by the list length, so equal inputs map to 1.0 each.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    softmax(raw).into_iter().map(|p| p * n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RelationSchema;
    use ndarray::array;

    #[test]
    fn identical_rows_give_n_log_n() {
        let e = Array2::from_elem((5, 3), 0.7);
        let loss = infonce_loss(&e, &e, &[0, 1, 2, 3, 4], 0.1).unwrap();
        assert!((loss - 5.0 * 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_user_is_zero() {
        let e = array![[1.0, 2.0]];
        assert!(infonce_loss(&e, &e, &[0], 0.1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_user_hand_case() {
        // anchors (1,0),(0,1); candidates (1,1),(0,1); tau = 0.5
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![[1.0, 1.0], [0.0, 1.0]];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let l0 = -((r / 0.5f64).exp() / ((r / 0.5f64).exp() + 1.0)).ln();
        let l1 = -((1.0 / 0.5f64).exp() / ((r / 0.5f64).exp() + (1.0 / 0.5f64).exp())).ln();
        let loss = infonce_loss(&x, &y, &[0, 1], 0.5).unwrap();
        assert!((loss - (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rows_are_counted() {
        let x = array![[0.0, 0.0], [1.0, 0.0]];
        let out = InfoNce::forward(&x, &x, 0.2).unwrap();
        assert_eq!(out.zero_norm, 2);
        assert!(out.total.is_finite());
    }

    #[test]
    fn infonce_backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(4, crate::rng::Stream::InitBase);
        let x = crate::chains::xavier_uniform(4, 3, &mut rng);
        let y = crate::chains::xavier_uniform(4, 3, &mut rng);
        let up = [0.5, 1.0, -2.0, 0.25];
        let f = |x: &Array2<f64>, y: &Array2<f64>| -> f64 {
            let o = InfoNce::forward(x, y, 0.1).unwrap();
            o.per_user.iter().zip(&up).map(|(l, g)| l * g).sum()
        };
        let out = InfoNce::forward(&x, &y, 0.1).unwrap();
        let (dx, dy) = out.backward(&x, &y, &up);
        let h = 1e-6;
        for (m, grad, is_x) in [(&x, &dx, true), (&y, &dy, false)] {
            for ((r, c), &g) in grad.indexed_iter() {
                let mut p = m.clone();
                let mut q = m.clone();
                p[[r, c]] += h;
                q[[r, c]] -= h;
                let fd = if is_x { (f(&p, &y) - f(&q, &y)) / (2.0 * h) } else { (f(&x, &p) - f(&x, &q)) / (2.0 * h) };
                assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn chain_knowledge_blocks() {
        let schema = RelationSchema::new(&["view", "cart", "buy"], "buy", None).unwrap();
        let chains = crate::chains::enumerate_chains(&schema);
        let losses = [0.0, 0.0, 99.0];
        let f = chain_knowledge(&chains[0], 2, &losses, &[1.0; 4], &[2.0; 4], 0.5);
        assert_eq!(&f[..4], &[0.0; 4]);
        assert_eq!(f.len(), 12);
        let losses = [1.5, 0.5, 99.0];
        let f = chain_knowledge(&chains[0], 2, &losses, &[1.0; 4], &[2.0; 4], 0.5);
        assert_eq!(&f[..4], &[0.75; 4]);
        // view->cart->buy sums view and cart only
        let f = chain_knowledge(&chains[2], 2, &losses, &[1.0; 4], &[2.0; 4], 0.5);
        assert_eq!(&f[..4], &[1.0; 4]);
        assert_eq!(&f[4..8], &[1.0; 4]);
        assert_eq!(&f[8..], &[2.0; 4]);
    }

    #[test]
    fn relation_knowledge_cases() {
        assert_eq!(relation_knowledge(0, 2, 0.0, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![0.0; 4]);
        assert_eq!(relation_knowledge(0, 2, 1.0, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(relation_knowledge(0, 2, 2.0, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![2.0, 0.0, 0.0, 2.0]);
        assert!(relation_knowledge(2, 2, 1.0, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn encoder_cases() {
        let zero_w = |b| EncoderParams { weights: vec![0.0; 6], bias: b };
        assert_eq!(encode_weight(&[1.0; 6], &zero_w(3.0), 0.01).unwrap(), 3.0);
        assert!((encode_weight(&[1.0; 6], &zero_w(-2.0), 0.01).unwrap() + 0.02).abs() < 1e-15);
        let d = 4;
        let p = EncoderParams { weights: vec![1.0 / (3 * d) as f64; 3 * d], bias: 0.0 };
        assert!((encode_weight(&vec![1.0; 3 * d], &p, 0.01).unwrap() - 1.0).abs() < 1e-12);
        assert!(encode_weight(&[1.0], &p, 0.01).is_err());
    }

    #[test]
    fn weight_normalization() {
        assert_eq!(normalize_weights(&[0.3, 0.3, 0.3]), vec![1.0, 1.0, 1.0]);
        assert_eq!(normalize_weights(&[-4.0]), vec![1.0]);
        let w = normalize_weights(&[0.0, 2f64.ln()]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 4.0 / 3.0).abs() < 1e-12);
    }
}
