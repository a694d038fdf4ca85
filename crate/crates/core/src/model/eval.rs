use serde::{Deserialize, Serialize};

use super::config::MicroTransformerConfig;
use super::corpus::Batch;
use super::forward::{forward, ActScales, Precision, ScaleSource, StudentQuant};
use super::params::Params;
use super::ModelError;
use crate::gradtape::Tape;
use crate::kernels::CostCounter;
use crate::par::{self, Exec};

/// Sequences per evaluation batch.
pub const EVAL_SEQS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ppl: f64,
    pub mean_ce: f64,
    pub tokens: usize,
    pub cost: CostCounter,
    /// Integer multiplies per evaluated token; zero for the float path.
    pub mul_per_token: f64,
}

/// `exp(mean CE)` over consecutive windows of `stream`. With `scales`, the
/// student runs on the integer kernels with frozen calibration; without, the
/// float path is used.
pub fn perplexity_eval(
    cfg: &MicroTransformerConfig,
    params: &Params,
    stream: &[usize],
    scales: Option<&ActScales>,
) -> Result<EvalResult, ModelError> {
    let batches = Batch::tiled(stream, EVAL_SEQS, cfg.seq_len);
    if batches.is_empty() {
        return Err(ModelError::Corpus(format!(
            "evaluation stream of {} tokens holds no window of {}",
            stream.len(),
            cfg.seq_len
        )));
    }
    let parts = par::map_range(batches.len(), Exec::default(), |i| {
        let batch = &batches[i];
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let quant = scales.map(|s| StudentQuant {
            weight_bits: cfg.weight_bits,
            plan: cfg.plan_mode(),
            precision: Precision::Integer,
            scales: ScaleSource::Frozen(s),
        });
        let pass = forward(&mut tape, cfg, &vars, batch, quant)?;
        let ce = tape.cross_entropy(pass.logits, &batch.targets)?;
        Ok::<_, ModelError>((tape.value(ce).item().expect("scalar") * batch.rows() as f64, batch.rows(), pass.cost))
    });
    let (mut sum, mut tokens, mut cost) = (0.0, 0usize, CostCounter::default());
    for part in parts {
        let (s, n, c) = part?;
        sum += s;
        tokens += n;
        cost.absorb(c);
    }
    let mean_ce = sum / tokens as f64;
    let ppl = mean_ce.exp();
    if !ppl.is_finite() {
        return Err(ModelError::NonFinite {
            step: 0,
            detail: format!("evaluation cross-entropy {mean_ce}"),
        });
    }
    Ok(EvalResult {
        ppl,
        mean_ce,
        tokens,
        cost,
        mul_per_token: cost.mul_count as f64 / tokens as f64,
    })
}
