use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{MicroTransformerConfig, PlanMode};
use super::corpus::Batch;
use super::params::{Layout, Slot};
use super::ModelError;
use crate::gradtape::{Tape, Tensor, Var};
use crate::kernels::{
    gemm_mixed, pack_int4, ActivationGroups, CostCounter, Int8Matrix, MixedScales, WeightOperand,
};
use crate::quant::{
    fake_quant_grouped, fake_quant_mode, quantize, scale_for_max, BitWidth, EmaState, FakeQuantMode, QuantSpec,
    QuantTarget,
};
use crate::token_control::{assign_bits, first_column_scores, TokenGroups};

const LN_EPS: f64 = 1e-5;

/// Arithmetic used by the student's projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Fake quantization with straight-through gradients.
    Fake(FakeQuantMode),
    /// Integer kernels; outputs are constants on the tape.
    Integer,
}

/// Running activation ranges, one per `(layer, site, bits)` key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActScales {
    pub momentum: f64,
    pub ema: BTreeMap<String, EmaState>,
}

impl ActScales {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            ema: BTreeMap::new(),
        }
    }
}

/// Every scale and plan used in one pass, replayable for gradient checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantTrace {
    pub weight: BTreeMap<String, f64>,
    pub act: BTreeMap<String, f64>,
    /// Per layer, `true` for rows quantized at 8 bits.
    pub plans: Vec<Vec<bool>>,
}

/// Where activation and weight scales come from.
pub enum ScaleSource<'a> {
    /// Training: fold the current range into the running averages.
    Update(&'a mut ActScales),
    /// Evaluation: read the running averages without changing them.
    Frozen(&'a ActScales),
    /// Replay scales and plans of an earlier pass.
    Trace(&'a QuantTrace),
}

/// Student quantization settings for one pass.
pub struct StudentQuant<'a> {
    pub weight_bits: BitWidth,
    pub plan: PlanMode,
    pub precision: Precision,
    pub scales: ScaleSource<'a>,
}

/// Tape nodes and side outputs of a forward pass over a batch of `R` rows.
pub struct Pass {
    /// `[R, V]`.
    pub logits: Var,
    /// `[layer][head]`, each `[R, T]`: per-sequence causal maps stacked by rows.
    pub attn: Vec<Vec<Var>>,
    /// `[layer][head]`, each `[R, d / H]`, after quantization in the student.
    pub q: Vec<Vec<Var>>,
    pub k: Vec<Vec<Var>>,
    pub trace: QuantTrace,
    pub cost: CostCounter,
}

struct Ctx<'a, 'b> {
    tape: &'a mut Tape,
    quant: Option<StudentQuant<'b>>,
    trace: QuantTrace,
    cost: CostCounter,
    plan: Vec<bool>,
}

fn site_key(layer: usize, site: &str, bits: BitWidth) -> String {
    format!("layers.{layer}.{site}.a{}", bits.bits())
}

fn group_max(x: &Tensor, mask: &[bool], want: bool) -> Option<f64> {
    let mut any = false;
    let mut m = 0.0f64;
    for (r, &hi) in mask.iter().enumerate() {
        if hi == want {
            any = true;
            m = x.row(r).iter().fold(m, |a, v| a.max(v.abs()));
        }
    }
    any.then_some(m)
}

impl Ctx<'_, '_> {
    fn act_scale(&mut self, layer: usize, site: &str, bits: BitWidth, observed: Option<f64>) -> f64 {
        let Some(observed) = observed else { return 1.0 };
        let key = site_key(layer, site, bits);
        let q = self.quant.as_mut().expect("student pass");
        let scale = match &mut q.scales {
            ScaleSource::Update(s) => {
                let momentum = s.momentum;
                let ema = s
                    .ema
                    .entry(key.clone())
                    .or_insert_with(|| EmaState::new(momentum).expect("validated momentum"));
                scale_for_max(ema.update(observed), bits)
            }
            ScaleSource::Frozen(s) => {
                let m = s.ema.get(&key).filter(|e| e.initialized).map_or(observed, |e| e.running_max);
                scale_for_max(m, bits)
            }
            ScaleSource::Trace(t) => t.act.get(&key).copied().unwrap_or_else(|| scale_for_max(observed, bits)),
        };
        self.trace.act.insert(key, scale);
        scale
    }

    fn weight_scale(&mut self, key: String, w: &Tensor, bits: BitWidth) -> f64 {
        let q = self.quant.as_ref().expect("student pass");
        let scale = match &q.scales {
            ScaleSource::Trace(t) => t.weight.get(&key).copied().unwrap_or_else(|| scale_for_max(w.max_abs(), bits)),
            _ => scale_for_max(w.max_abs(), bits),
        };
        self.trace.weight.insert(key, scale);
        scale
    }

    fn fake_mode(&self) -> FakeQuantMode {
        match self.quant.as_ref().map(|q| q.precision) {
            Some(Precision::Fake(mode)) => mode,
            _ => FakeQuantMode::Round,
        }
    }

    /// Token-grouped activation quantization for non-projection sites.
    fn quant_act(&mut self, x: Var, layer: usize, site: &str) -> Result<Var, ModelError> {
        if self.quant.is_none() {
            return Ok(x);
        }
        let (hi_max, lo_max) = {
            let t = self.tape.value(x);
            (group_max(t, &self.plan, true), group_max(t, &self.plan, false))
        };
        let hi = self.act_scale(layer, site, BitWidth::Eight, hi_max);
        let lo = self.act_scale(layer, site, BitWidth::Four, lo_max);
        let hs = QuantSpec::new(BitWidth::Eight, hi, QuantTarget::Activation)?;
        let ls = QuantSpec::new(BitWidth::Four, lo, QuantTarget::Activation)?;
        let mode = self.fake_mode();
        Ok(fake_quant_grouped(self.tape, x, &self.plan, &hs, &ls, mode)?)
    }

    fn linear(&mut self, x: Var, w: Var, layer: usize, slot: Slot, site: &str) -> Result<Var, ModelError> {
        let Some(q) = self.quant.as_ref() else {
            return Ok(self.tape.matmul(x, w)?);
        };
        let (bits, precision) = (q.weight_bits, q.precision);
        let wv = self.tape.value(w).clone();
        let w_scale = self.weight_scale(format!("layers.{layer}.{}", slot.name()), &wv, bits);
        let w_spec = QuantSpec::new(bits, w_scale, QuantTarget::Weight)?;
        match precision {
            Precision::Fake(mode) => {
                let xq = self.quant_act(x, layer, site)?;
                let wq = fake_quant_mode(self.tape, w, &w_spec, mode)?;
                Ok(self.tape.matmul(xq, wq)?)
            }
            Precision::Integer => {
                let xv = self.tape.value(x).clone();
                let hi_scale = self.act_scale(layer, site, BitWidth::Eight, group_max(&xv, &self.plan, true));
                let lo_scale = self.act_scale(layer, site, BitWidth::Four, group_max(&xv, &self.plan, false));
                let (k, m) = (wv.rows(), wv.cols());
                let wi = quantize(&wv, &w_spec);
                let wm = Int8Matrix::from_fn(m, k, |r, c| wi.ints()[c * m + r]);
                let operand = match bits {
                    BitWidth::Four => WeightOperand::Int4(pack_int4(&wm)?),
                    BitWidth::Eight => WeightOperand::Int8(wm),
                };
                let groups = TokenGroups::from_mask(&self.plan);
                let (xh, xl) = groups.gather(&xv)?;
                let to_cols = |t: &Tensor, bits: BitWidth, scale: f64| -> Result<Int8Matrix, ModelError> {
                    let qt = quantize(t, &QuantSpec::new(bits, scale, QuantTarget::Activation)?);
                    Ok(Int8Matrix::new(t.rows(), k, qt.ints().to_vec())?.transpose())
                };
                let hi = to_cols(&xh, BitWidth::Eight, hi_scale)?;
                let lo = to_cols(&xl, BitWidth::Four, lo_scale)?;
                let ag = ActivationGroups::new(hi, lo, groups.hi_indices, groups.lo_indices)?;
                let scales = MixedScales {
                    weight: w_scale,
                    hi: hi_scale,
                    lo: lo_scale,
                };
                let y = gemm_mixed(&operand, &ag, scales, &mut self.cost)?;
                Ok(self.tape.constant(y.transpose2()))
            }
        }
    }

    fn layer_plan(&self, layer: usize, prev_attn: Option<&[Var]>, batch: &Batch) -> Result<Vec<bool>, ModelError> {
        let rows = batch.rows();
        let Some(q) = self.quant.as_ref() else {
            return Ok(Vec::new());
        };
        if let ScaleSource::Trace(t) = &q.scales {
            if let Some(p) = t.plans.get(layer) {
                return Ok(p.clone());
            }
        }
        Ok(match q.plan {
            PlanMode::Uniform(b) => vec![b == BitWidth::Eight; rows],
            PlanMode::Adaptive(rho) => match prev_attn {
                None => vec![crate::token_control::high_count(rho, batch.len) > 0; rows],
                Some(heads) => {
                    let t = batch.len;
                    let mut mask = Vec::with_capacity(rows);
                    for b in 0..batch.seqs {
                        let maps: Vec<&[f64]> = heads
                            .iter()
                            .map(|&h| &self.tape.value(h).data()[b * t * t..(b + 1) * t * t])
                            .collect();
                        let scores = first_column_scores(&maps, t);
                        mask.extend(assign_bits(&scores, rho)?.hi_mask());
                    }
                    mask
                }
            },
        })
    }
}

/// Runs the micro transformer over `batch` with parameters bound as `vars`.
/// `quant = None` is the full-precision teacher path.
pub fn forward(
    tape: &mut Tape,
    cfg: &MicroTransformerConfig,
    vars: &[Var],
    batch: &Batch,
    quant: Option<StudentQuant<'_>>,
) -> Result<Pass, ModelError> {
    let lay = Layout::new(cfg.layers);
    let (t, rows, d, h) = (batch.len, batch.rows(), cfg.d_model, cfg.heads);
    let dh = cfg.head_dim();
    if t > cfg.seq_len {
        return Err(ModelError::Length { len: t, max: cfg.seq_len });
    }
    if let Some(&id) = batch.inputs.iter().chain(&batch.targets).find(|&&id| id >= cfg.vocab) {
        return Err(ModelError::Token { id, vocab: cfg.vocab });
    }
    let mut cx = Ctx {
        tape,
        quant,
        trace: QuantTrace::default(),
        cost: CostCounter::default(),
        plan: Vec::new(),
    };
    let positions: Vec<usize> = (0..rows).map(|r| r % t).collect();
    let tok = cx.tape.embedding(vars[lay.tok_emb()], &batch.inputs)?;
    let pos = cx.tape.embedding(vars[lay.pos_emb()], &positions)?;
    let mut x = cx.tape.add(tok, pos)?;
    let (mut attn, mut qs, mut ks) = (Vec::new(), Vec::new(), Vec::new());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    for l in 0..cfg.layers {
        let p = |s: Slot| vars[lay.layer(l, s)];
        cx.plan = cx.layer_plan(l, attn.last().map(Vec::as_slice), batch)?;
        if cx.quant.is_some() {
            cx.trace.plans.push(cx.plan.clone());
        }

        let hn = cx.tape.layernorm(x, p(Slot::Ln1Gain), p(Slot::Ln1Bias), LN_EPS)?;
        let qkv = cx.linear(hn, p(Slot::Qkv), l, Slot::Qkv, "qkv")?;
        let q = cx.tape.slice(qkv, 0..rows, 0..d)?;
        let k = cx.tape.slice(qkv, 0..rows, d..2 * d)?;
        let v = cx.tape.slice(qkv, 0..rows, 2 * d..3 * d)?;
        let q = cx.quant_act(q, l, "q")?;
        let k = cx.quant_act(k, l, "k")?;

        let (mut layer_attn, mut layer_q, mut layer_k, mut heads_out) = (vec![], vec![], vec![], vec![]);
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let qh = cx.tape.slice(q, 0..rows, cols.clone())?;
            let kh = cx.tape.slice(k, 0..rows, cols.clone())?;
            let vh = cx.tape.slice(v, 0..rows, cols)?;
            let mut blocks = Vec::with_capacity(batch.seqs);
            for b in 0..batch.seqs {
                let r = b * t..(b + 1) * t;
                let qb = cx.tape.slice(qh, r.clone(), 0..dh)?;
                let kb = cx.tape.slice(kh, r, 0..dh)?;
                let kt = cx.tape.transpose(kb);
                let s = cx.tape.matmul(qb, kt)?;
                blocks.push(cx.tape.scale(s, inv_sqrt));
            }
            let scores = cx.tape.concat_rows(&blocks)?;
            let a = cx.tape.softmax_rows(scores, true)?;
            let mut outs = Vec::with_capacity(batch.seqs);
            for b in 0..batch.seqs {
                let r = b * t..(b + 1) * t;
                let ab = cx.tape.slice(a, r.clone(), 0..t)?;
                let vb = cx.tape.slice(vh, r, 0..dh)?;
                outs.push(cx.tape.matmul(ab, vb)?);
            }
            heads_out.push(cx.tape.concat_rows(&outs)?);
            layer_attn.push(a);
            layer_q.push(qh);
            layer_k.push(kh);
        }
        let ctx = cx.tape.concat_cols(&heads_out)?;
        let o = cx.linear(ctx, p(Slot::AttnOut), l, Slot::AttnOut, "attn_out")?;
        x = cx.tape.add(x, o)?;

        let hn = cx.tape.layernorm(x, p(Slot::Ln2Gain), p(Slot::Ln2Bias), LN_EPS)?;
        let u = cx.linear(hn, p(Slot::MlpIn), l, Slot::MlpIn, "mlp_in")?;
        let g = cx.tape.gelu(u);
        let m = cx.linear(g, p(Slot::MlpOut), l, Slot::MlpOut, "mlp_hidden")?;
        x = cx.tape.add(x, m)?;

        attn.push(layer_attn);
        qs.push(layer_q);
        ks.push(layer_k);
    }
    let hn = cx.tape.layernorm(x, vars[lay.final_gain()], vars[lay.final_bias()], LN_EPS)?;
    let logits = cx.tape.matmul(hn, vars[lay.lm_head()])?;
    Ok(Pass {
        logits,
        attn,
        q: qs,
        k: ks,
        trace: cx.trace,
        cost: cx.cost,
    })
}
