//! Training objectives: entropy over query/key variances, attention-map
//! alignment, soft distillation, and their weighted total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradtape::{Tape, TapeError, Tensor, Var};
use crate::token_control::AttentionMap;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{name} must satisfy {rule}, got {value}")]
    Parameter {
        name: &'static str,
        rule: &'static str,
        value: f64,
    },
    #[error("loss term {name} is not finite ({value})")]
    NonFinite { name: &'static str, value: f64 },
    #[error("expected a [L, H, N, d] tensor, got {0:?}")]
    Layout(Vec<usize>),
    #[error("attention maps differ in shape: {lhs:?} vs {rhs:?}")]
    MapShape {
        lhs: (usize, usize, usize),
        rhs: (usize, usize, usize),
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Sign applied to the alignment sum before it enters the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSign {
    /// Contributes `-ln(eps + s)`; minimizing the total raises similarity.
    #[default]
    Negated,
    /// Contributes `ln(eps + s)`.
    Literal,
}

impl AlignmentSign {
    fn factor(self) -> f64 {
        match self {
            AlignmentSign::Negated => -1.0,
            AlignmentSign::Literal => 1.0,
        }
    }
}

/// Population variances of query and key entries, per `(layer, head)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub layers: usize,
    pub heads: usize,
    pub q_var: Vec<f64>,
    pub k_var: Vec<f64>,
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Per layer-head variances of `q, k: [L, H, N, d]`.
pub fn qk_stats(q: &Tensor, k: &Tensor) -> Result<GaussianStats, LossError> {
    let dims = |t: &Tensor| match t.shape() {
        &[l, h, _, _] => Ok((l, h)),
        s => Err(LossError::Layout(s.to_vec())),
    };
    let (layers, heads) = dims(q)?;
    if q.shape() != k.shape() {
        return Err(LossError::Layout(k.shape().to_vec()));
    }
    let chunk = q.len() / (layers * heads).max(1);
    let per_head = |t: &Tensor| t.data().chunks(chunk.max(1)).map(population_variance).collect();
    Ok(GaussianStats {
        layers,
        heads,
        q_var: per_head(q),
        k_var: per_head(k),
    })
}

fn check_eps(eps: f64) -> Result<(), LossError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(LossError::Parameter {
            name: "eps",
            rule: "eps > 0",
            value: eps,
        })
    }
}

/// `-ln(eps + sum ln(1 + var_q * var_k))`.
pub fn entropy_loss(stats: &GaussianStats, eps: f64) -> Result<f64, LossError> {
    check_eps(eps)?;
    let s: f64 = stats
        .q_var
        .iter()
        .zip(&stats.k_var)
        .map(|(q, k)| (1.0 + q * k).ln())
        .sum();
    Ok(-(eps + s).ln())
}

/// Tape form of [`entropy_loss`] over per-head query and key nodes.
pub fn entropy_loss_tape(tape: &mut Tape, heads: &[(Var, Var)], eps: f64) -> Result<Var, LossError> {
    check_eps(eps)?;
    let mut terms = Vec::with_capacity(heads.len());
    for &(q, k) in heads {
        let vq = tape.variance(q);
        let vk = tape.variance(k);
        let prod = tape.mul(vq, vk)?;
        let shifted = tape.add_scalar(prod, 1.0);
        terms.push(tape.log(shifted)?);
    }
    let s = tape.add_all(&terms)?;
    let guarded = tape.add_scalar(s, eps);
    let l = tape.log(guarded)?;
    Ok(tape.neg(l))
}

/// Alignment sum and the term it contributes to the total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub similarity: f64,
    pub loss: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Sum over layers and heads of the cosine between flattened maps.
pub fn distribution_loss(
    attn_q: &AttentionMap,
    attn_f: &AttentionMap,
    eps: f64,
    sign: AlignmentSign,
) -> Result<Alignment, LossError> {
    check_eps(eps)?;
    let shape = |m: &AttentionMap| (m.layers(), m.heads(), m.tokens());
    if shape(attn_q) != shape(attn_f) {
        return Err(LossError::MapShape {
            lhs: shape(attn_q),
            rhs: shape(attn_f),
        });
    }
    let mut s = 0.0;
    for l in 0..attn_q.layers() {
        for h in 0..attn_q.heads() {
            s += cosine(attn_q.head(l, h), attn_f.head(l, h));
        }
    }
    Ok(Alignment {
        similarity: s,
        loss: sign.factor() * (eps + s).ln(),
    })
}

/// Tape form of [`distribution_loss`]; returns `(similarity, loss)` nodes.
pub fn distribution_loss_tape(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    eps: f64,
    sign: AlignmentSign,
) -> Result<(Var, Var), LossError> {
    check_eps(eps)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for &(student, teacher) in pairs {
        terms.push(tape.cosine(student, teacher)?);
    }
    let s = tape.add_all(&terms)?;
    let guarded = tape.add_scalar(s, eps);
    let l = tape.log(guarded)?;
    Ok((s, tape.scale(l, sign.factor())))
}

/// Weights and hyperparameters of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub r_e: f64,
    pub r_d: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eps: f64,
    pub alignment_sign: AlignmentSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            r_e: 0.5,
            r_d: 1.0,
            gamma: 0.5,
            tau: 2.0,
            eps: DEFAULT_EPS,
            alignment_sign: AlignmentSign::Negated,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let checks: [(&'static str, &'static str, f64, bool); 5] = [
            ("gamma", "0 <= gamma <= 1", self.gamma, (0.0..=1.0).contains(&self.gamma)),
            ("tau", "tau > 0", self.tau, self.tau > 0.0 && self.tau.is_finite()),
            ("r_e", "r_e >= 0", self.r_e, self.r_e >= 0.0 && self.r_e.is_finite()),
            ("r_d", "r_d >= 0", self.r_d, self.r_d >= 0.0 && self.r_d.is_finite()),
            ("eps", "eps > 0", self.eps, self.eps > 0.0 && self.eps.is_finite()),
        ];
        for (name, rule, value, ok) in checks {
            if !ok {
                return Err(LossError::Parameter { name, rule, value });
            }
        }
        Ok(())
    }

    /// `(1 - gamma) * ce + gamma * tau^2 * kl`, in the order the tape uses.
    pub fn distill(&self, ce: f64, kl: f64) -> f64 {
        (1.0 - self.gamma) * ce + self.kl_weight() * kl
    }

    fn kl_weight(&self) -> f64 {
        self.gamma * self.tau * self.tau
    }
}

/// Distillation nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DistillNodes {
    pub ce: Var,
    pub kl: Var,
    pub distill: Var,
}

/// `(1 - gamma) * CE(student, targets) + gamma * tau^2 * KL(teacher || student)`.
pub fn distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Var,
    targets: &[usize],
    weights: &LossWeights,
) -> Result<DistillNodes, LossError> {
    weights.validate()?;
    let ce = tape.cross_entropy(student_logits, targets)?;
    let kl = tape.kl_divergence(student_logits, teacher_logits, weights.tau)?;
    let a = tape.scale(ce, 1.0 - weights.gamma);
    let b = tape.scale(kl, weights.kl_weight());
    let distill = tape.add(a, b)?;
    Ok(DistillNodes { ce, kl, distill })
}

/// `distill + r_e * entropy + r_d * distribution` on a tape, matching
/// [`total_loss`] operation for operation.
pub fn total_loss_tape(
    tape: &mut Tape,
    distill: Var,
    entropy: Var,
    distribution: Var,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    let e = tape.scale(entropy, weights.r_e);
    let d = tape.scale(distribution, weights.r_d);
    let partial = tape.add(distill, e)?;
    Ok(tape.add(partial, d)?)
}

/// Every scalar of one objective evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub kl: f64,
    pub distill: f64,
    pub entropy_loss: f64,
    pub distribution_loss: f64,
    pub similarity: f64,
    pub total: f64,
    pub r_e: f64,
    pub r_d: f64,
    pub gamma: f64,
    pub tau: f64,
}

/// Reassembles the total from its terms, rejecting non-finite inputs.
pub fn total_loss(
    ce: f64,
    kl: f64,
    entropy: f64,
    distribution: Alignment,
    weights: &LossWeights,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    for (name, value) in [
        ("ce", ce),
        ("kl", kl),
        ("entropy", entropy),
        ("distribution", distribution.loss),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { name, value });
        }
    }
    let distill = weights.distill(ce, kl);
    let total = distill + weights.r_e * entropy + weights.r_d * distribution.loss;
    if !total.is_finite() {
        return Err(LossError::NonFinite { name: "total", value: total });
    }
    Ok(LossReport {
        ce,
        kl,
        distill,
        entropy_loss: entropy,
        distribution_loss: distribution.loss,
        similarity: distribution.similarity,
        total,
        r_e: weights.r_e,
        r_d: weights.r_d,
        gamma: weights.gamma,
        tau: weights.tau,
    })
}
