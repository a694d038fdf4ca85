//! Token-adaptive bit allocation: score tokens by their attention to the
//! first token, keep the top `floor(rho * N)` at 8 bits, and route the rest
//! to 4 bits.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradtape::Tensor;
use crate::quant::{quantize, BitWidth, QuantError, QuantSpec, QuantTarget, QuantizedTensor};

/// Slack when flooring `rho * N`, so that e.g. `0.3 * 10` selects 3 tokens.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("layer {layer} out of range for {layers} layers")]
    Layer { layer: usize, layers: usize },
    #[error("top-k of {k} requested from {n} scores")]
    TopK { k: usize, n: usize },
    #[error("rho must lie in [0, 1], got {0}")]
    Rho(f64),
    #[error("attention map needs {expected} values, got {len}")]
    Length { expected: usize, len: usize },
    #[error("attention row (layer {layer}, head {head}, row {row}) is not causal and stochastic")]
    NotStochastic { layer: usize, head: usize, row: usize },
    #[error("plan covers {plan} tokens but the activation has {rows}")]
    PlanLength { plan: usize, rows: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Causal attention probabilities laid out as `[L, H, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    layers: usize,
    heads: usize,
    tokens: usize,
    probs: Vec<f64>,
}

impl AttentionMap {
    /// Validates row sums (within 1e-6) and exact zeros above the diagonal.
    pub fn new(layers: usize, heads: usize, tokens: usize, probs: Vec<f64>) -> Result<Self, TokenError> {
        let expected = layers * heads * tokens * tokens;
        if probs.len() != expected {
            return Err(TokenError::Length {
                expected,
                len: probs.len(),
            });
        }
        for (idx, row) in probs.chunks(tokens.max(1)).enumerate().take(layers * heads * tokens) {
            let i = idx % tokens;
            let sum: f64 = row.iter().sum();
            let ok = (sum - 1.0).abs() <= 1e-6
                && row[i + 1..].iter().all(|&p| p == 0.0)
                && row.iter().all(|&p| p >= 0.0);
            if !ok {
                return Err(TokenError::NotStochastic {
                    layer: idx / (heads * tokens),
                    head: idx / tokens % heads,
                    row: i,
                });
            }
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            probs,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        self.probs[self.offset(layer, head) + i * self.tokens + j]
    }

    /// The `[N, N]` map of one head, row-major.
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let o = self.offset(layer, head);
        &self.probs[o..o + self.tokens * self.tokens]
    }

    /// Head-averaged `[N, N]` map of one layer.
    pub fn head_average(&self, layer: usize) -> Vec<f64> {
        let nn = self.tokens * self.tokens;
        let mut out = vec![0.0; nn];
        for h in 0..self.heads {
            for (o, p) in out.iter_mut().zip(self.head(layer, h)) {
                *o += p;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.heads as f64);
        out
    }

    fn offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.heads + head) * self.tokens * self.tokens
    }
}

/// Mean over heads of column 0, given each head's `[N, N]` map.
pub fn first_column_scores(heads: &[&[f64]], tokens: usize) -> Vec<f64> {
    let mut scores = vec![0.0; tokens];
    for map in heads {
        for (i, s) in scores.iter_mut().enumerate() {
            *s += map[i * tokens];
        }
    }
    let h = heads.len().max(1) as f64;
    scores.iter_mut().for_each(|s| *s /= h);
    scores
}

/// Averaged attentivity of every token to the first token at `layer`.
pub fn token_importance(attn: &AttentionMap, layer: usize) -> Result<Vec<f64>, TokenError> {
    if layer >= attn.layers {
        return Err(TokenError::Layer {
            layer,
            layers: attn.layers,
        });
    }
    let heads: Vec<&[f64]> = (0..attn.heads).map(|h| attn.head(layer, h)).collect();
    Ok(first_column_scores(&heads, attn.tokens))
}

/// Result of [`heap_topk`]: the selected indices in ascending order and the
/// smallest selected score.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub threshold: Option<f64>,
    pub indices: Vec<usize>,
}

/// Heap entry ordered so that the max-heap root is the weakest selection:
/// lower score first, then higher index.
#[derive(Clone, Copy, Debug)]
struct Weakest {
    score: f64,
    index: usize,
}

impl PartialEq for Weakest {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Weakest {}

impl PartialOrd for Weakest {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Weakest {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.index.cmp(&other.index))
    }
}

/// Selects the `k` largest scores with a size-`k` heap, ties going to the
/// lower index. `O(N log k)` comparisons.
pub fn heap_topk(scores: &[f64], k: usize) -> Result<TopK, TokenError> {
    if k > scores.len() {
        return Err(TokenError::TopK { k, n: scores.len() });
    }
    if k == 0 {
        return Ok(TopK {
            threshold: None,
            indices: Vec::new(),
        });
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (index, &score) in scores.iter().enumerate() {
        let item = Weakest { score, index };
        if heap.len() < k {
            heap.push(item);
        } else if item < *heap.peek().expect("heap holds k > 0 items") {
            heap.pop();
            heap.push(item);
        }
    }
    let threshold = heap.peek().map(|w| w.score);
    let mut indices: Vec<usize> = heap.into_iter().map(|w| w.index).collect();
    indices.sort_unstable();
    Ok(TopK { threshold, indices })
}

/// Number of 8-bit tokens for ratio `rho` over `n` tokens.
pub fn high_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64 + FLOOR_SLACK).floor() as usize).min(n)
}

/// Per-token bit assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBitPlan {
    pub bits: Vec<BitWidth>,
    pub rho: f64,
    pub k: usize,
}

impl TokenBitPlan {
    /// Every token at the same width.
    pub fn uniform(n: usize, bits: BitWidth) -> Self {
        let (rho, k) = match bits {
            BitWidth::Eight => (1.0, n),
            BitWidth::Four => (0.0, 0),
        };
        Self {
            bits: vec![bits; n],
            rho,
            k,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `true` for 8-bit tokens.
    pub fn hi_mask(&self) -> Vec<bool> {
        self.bits.iter().map(|&b| b == BitWidth::Eight).collect()
    }
}

/// The top `floor(rho * N)` tokens by score get 8 bits, the rest 4.
pub fn assign_bits(scores: &[f64], rho: f64) -> Result<TokenBitPlan, TokenError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(TokenError::Rho(rho));
    }
    let k = high_count(rho, scores.len());
    let top = heap_topk(scores, k)?;
    let mut bits = vec![BitWidth::Four; scores.len()];
    for i in top.indices {
        bits[i] = BitWidth::Eight;
    }
    Ok(TokenBitPlan { bits, rho, k })
}

/// Where a layer's plan comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanSource {
    /// No earlier map exists in the pass.
    Uniform8,
    /// The attention map of the given earlier layer in the same pass.
    Layer(usize),
}

/// Layer 0 has no earlier map; every later layer reads its predecessor.
pub fn plan_source(layer: usize) -> PlanSource {
    match layer {
        0 => PlanSource::Uniform8,
        l => PlanSource::Layer(l - 1),
    }
}

/// Original token positions of each group, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGroups {
    pub hi_indices: Vec<usize>,
    pub lo_indices: Vec<usize>,
}

impl TokenGroups {
    pub fn from_mask(hi: &[bool]) -> Self {
        let (hi_indices, lo_indices) = (0..hi.len()).partition(|&i| hi[i]);
        Self { hi_indices, lo_indices }
    }

    pub fn from_plan(plan: &TokenBitPlan) -> Self {
        Self::from_mask(&plan.hi_mask())
    }

    pub fn tokens(&self) -> usize {
        self.hi_indices.len() + self.lo_indices.len()
    }

    /// Splits the rows of `x: [N, D]` into the 8-bit and 4-bit groups.
    pub fn gather(&self, x: &Tensor) -> Result<(Tensor, Tensor), TokenError> {
        if x.rows() != self.tokens() {
            return Err(TokenError::PlanLength {
                plan: self.tokens(),
                rows: x.rows(),
            });
        }
        let take = |idx: &[usize]| {
            let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            Tensor::from_raw(vec![idx.len(), x.cols()], data)
        };
        Ok((take(&self.hi_indices), take(&self.lo_indices)))
    }

    /// Inverse of [`TokenGroups::gather`].
    pub fn scatter(&self, hi: &Tensor, lo: &Tensor) -> Result<Tensor, TokenError> {
        let cols = if hi.rows() > 0 && !self.hi_indices.is_empty() {
            hi.cols()
        } else {
            lo.cols()
        };
        if hi.len() != self.hi_indices.len() * cols || lo.len() != self.lo_indices.len() * cols {
            return Err(TokenError::PlanLength {
                plan: self.tokens(),
                rows: hi.len() / cols.max(1) + lo.len() / cols.max(1),
            });
        }
        let mut out = vec![0.0; self.tokens() * cols];
        for (src, idx) in [(hi, &self.hi_indices), (lo, &self.lo_indices)] {
            for (r, &i) in idx.iter().enumerate() {
                out[i * cols..(i + 1) * cols].copy_from_slice(src.row(r));
            }
        }
        Ok(Tensor::from_raw(vec![self.tokens(), cols], out))
    }
}

/// An activation split by plan, each group quantized with its own scale.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedActivation {
    pub groups: TokenGroups,
    pub hi: QuantizedTensor,
    pub lo: QuantizedTensor,
}

/// Quantizes the 8-bit group at `hi_scale` and the 4-bit group at `lo_scale`.
pub fn group_quantize(
    x: &Tensor,
    plan: &TokenBitPlan,
    hi_scale: f64,
    lo_scale: f64,
) -> Result<GroupedActivation, TokenError> {
    if plan.len() != x.rows() {
        return Err(TokenError::PlanLength {
            plan: plan.len(),
            rows: x.rows(),
        });
    }
    let groups = TokenGroups::from_plan(plan);
    let (xh, xl) = groups.gather(x)?;
    let hi = quantize(&xh, &QuantSpec::new(BitWidth::Eight, hi_scale, QuantTarget::Activation)?);
    let lo = quantize(&xl, &QuantSpec::new(BitWidth::Four, lo_scale, QuantTarget::Activation)?);
    Ok(GroupedActivation { groups, hi, lo })
}
