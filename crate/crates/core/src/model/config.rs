use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::losses::{AlignmentSign, LossWeights};
use crate::quant::BitWidth;

/// Activation bit policy of the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ActBitsRepr", into = "ActBitsRepr")]
pub enum ActBits {
    Uniform(BitWidth),
    /// Per-token 8/4 bits driven by attention to the first token.
    Adaptive,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ActBitsRepr {
    Bits(u32),
    Name(String),
}

impl TryFrom<ActBitsRepr> for ActBits {
    type Error = String;

    fn try_from(r: ActBitsRepr) -> Result<Self, String> {
        match r {
            ActBitsRepr::Bits(b) => BitWidth::try_from(b).map(ActBits::Uniform).map_err(|e| e.to_string()),
            ActBitsRepr::Name(s) if s == "adaptive" => Ok(ActBits::Adaptive),
            ActBitsRepr::Name(s) => Err(format!("act_bits must be 4, 8 or \"adaptive\", got {s:?}")),
        }
    }
}

impl From<ActBits> for ActBitsRepr {
    fn from(a: ActBits) -> Self {
        match a {
            ActBits::Uniform(b) => ActBitsRepr::Bits(b.bits()),
            ActBits::Adaptive => ActBitsRepr::Name("adaptive".into()),
        }
    }
}

/// Architecture, quantization policy, objective weights and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub weight_bits: BitWidth,
    pub act_bits: ActBits,
    pub rho: f64,
    pub r_e: f64,
    pub r_d: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eps: f64,
    pub alignment_sign: AlignmentSign,
    pub seed: u64,
    /// Student learning rate.
    pub lr: f64,
    /// Student steps.
    pub steps: usize,
    pub teacher_lr: f64,
    pub teacher_steps: usize,
    /// Sequences per step.
    pub batch: usize,
    pub ema_momentum: f64,
    /// Characters of synthetic text generated when no corpus file is given.
    pub corpus_chars: usize,
}

impl Default for MicroTransformerConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            vocab: 64,
            seq_len: 32,
            weight_bits: BitWidth::Four,
            act_bits: ActBits::Adaptive,
            rho: 0.5,
            r_e: w.r_e,
            r_d: w.r_d,
            gamma: w.gamma,
            tau: w.tau,
            eps: w.eps,
            alignment_sign: w.alignment_sign,
            seed: 0,
            lr: 0.05,
            steps: 1000,
            teacher_lr: 0.5,
            teacher_steps: 3000,
            batch: 4,
            ema_momentum: 0.95,
            corpus_chars: 40_000,
        }
    }
}

impl MicroTransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &'static str, reason: String| Err(ModelError::Config { field, reason });
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 {
            return bad("layers/heads/d_model", "must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model", format!("{} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.vocab < 2 {
            return bad("vocab", "needs the BOS id and at least one symbol".into());
        }
        if self.seq_len < 2 {
            return bad("seq_len", "must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho", format!("{} outside [0, 1]", self.rho));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.teacher_lr > 0.0 && self.teacher_lr.is_finite()) {
            return bad("lr", "learning rates must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch", "must be positive".into());
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad("ema_momentum", format!("{} outside (0, 1)", self.ema_momentum));
        }
        self.loss_weights()
            .validate()
            .map_err(|e| ModelError::Config {
                field: "loss",
                reason: e.to_string(),
            })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            r_e: self.r_e,
            r_d: self.r_d,
            gamma: self.gamma,
            tau: self.tau,
            eps: self.eps,
            alignment_sign: self.alignment_sign,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Plan rule for the student's activations.
    pub fn plan_mode(&self) -> PlanMode {
        match self.act_bits {
            ActBits::Uniform(b) => PlanMode::Uniform(b),
            ActBits::Adaptive => PlanMode::Adaptive(self.rho),
        }
    }
}

/// How per-token activation widths are chosen in a pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlanMode {
    Uniform(BitWidth),
    Adaptive(f64),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn act_bits_serde() {
        let a: ActBits = serde_json::from_str("\"adaptive\"").unwrap();
        assert_eq!(a, ActBits::Adaptive);
        let b: ActBits = serde_json::from_str("8").unwrap();
        assert_eq!(b, ActBits::Uniform(BitWidth::Eight));
        assert!(serde_json::from_str::<ActBits>("6").is_err());
        assert_eq!(serde_json::to_string(&ActBits::Uniform(BitWidth::Four)).unwrap(), "4");
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<MicroTransformerConfig>("{\"layerz\": 2}").is_err());
        let c: MicroTransformerConfig = serde_json::from_str("{\"d_model\": 30, \"heads\": 4}").unwrap();
        assert!(c.validate().is_err());
        MicroTransformerConfig::default().validate().unwrap();
    }
}
