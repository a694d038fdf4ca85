//! Analysis dumps of a trained checkpoint: query/key spread, averaged
//! attention maps, first-column scores and the resulting bit plans.

use serde::Serialize;
use squant::gradtape::{Tape, Tensor};
use squant::model::corpus::encode;
use squant::model::{forward, Batch, MicroTransformerConfig, Params, Precision, ScaleSource, StudentQuant, TrainState, BOS};
use squant::token_control::first_column_scores;

use crate::commands::{load_checkpoint, load_corpus, Output};
use crate::config::RunConfig;
use crate::{write_csv, CmdResult, Failure};

/// Histogram bins per `(model, layer, tensor)`.
pub const HIST_BINS: usize = 32;

/// Everything `inspect` reads back from one forward pass.
struct Capture {
    /// `[layer][head]`: row-major `[T, d/H]`.
    q: Vec<Vec<Tensor>>,
    k: Vec<Vec<Tensor>>,
    /// `[layer][head]`: row-major `[T, T]`.
    attn: Vec<Vec<Tensor>>,
    plans: Vec<Vec<bool>>,
}

fn capture(cfg: &MicroTransformerConfig, params: &Params, batch: &Batch, quant: Option<StudentQuant<'_>>) -> CmdResult<Capture> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let pass = forward(&mut tape, cfg, &vars, batch, quant).map_err(Failure::check)?;
    let values = |vs: &Vec<Vec<squant::gradtape::Var>>| -> Vec<Vec<Tensor>> {
        vs.iter().map(|l| l.iter().map(|&v| tape.value(v).clone()).collect()).collect()
    };
    Ok(Capture {
        q: values(&pass.q),
        k: values(&pass.k),
        attn: values(&pass.attn),
        plans: pass.trace.plans,
    })
}

/// One sequence from `inspect_text`, or the first held-out window.
pub fn inspect_batch(cfg: &RunConfig, state: &TrainState) -> CmdResult<Batch> {
    let m = &state.cfg;
    let ids: Vec<usize> = match &cfg.inspect_text {
        Some(text) => encode(text, m.vocab).into_iter().take(m.seq_len).collect(),
        None => {
            let mut data_cfg = cfg.clone();
            data_cfg.model = m.clone();
            load_corpus(&data_cfg)?.heldout.into_iter().take(m.seq_len).collect()
        }
    };
    if ids.is_empty() {
        return Err(Failure::usage(anyhow::anyhow!("inspect text holds no in-vocabulary characters")));
    }
    let mut inputs = vec![BOS];
    inputs.extend_from_slice(&ids[..ids.len() - 1]);
    Ok(Batch {
        inputs,
        len: ids.len(),
        targets: ids,
        seqs: 1,
    })
}

#[derive(Serialize)]
struct StatsRow {
    layer: usize,
    head: usize,
    teacher_q_var: f64,
    teacher_k_var: f64,
    student_q_var: f64,
    student_k_var: f64,
}

#[derive(Serialize)]
struct HistRow {
    model: &'static str,
    layer: usize,
    tensor: &'static str,
    bin: usize,
    lo: f64,
    hi: f64,
    count: usize,
}

#[derive(Serialize)]
struct AttnRow {
    model: &'static str,
    layer: usize,
    row: usize,
    col: usize,
    prob: f64,
}

#[derive(Serialize)]
struct ScoreRow {
    model: &'static str,
    layer: usize,
    token: usize,
    score: f64,
}

#[derive(Serialize)]
struct PlanRow {
    layer: usize,
    token: usize,
    /// Score that selected this layer's plan; empty where no earlier map exists.
    score: Option<f64>,
    bits: u32,
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Symmetric histogram over `[-max, max]` of all heads' values.
fn histogram(model: &'static str, layer: usize, tensor: &'static str, heads: &[Tensor]) -> Vec<HistRow> {
    let max = heads.iter().map(Tensor::max_abs).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let width = 2.0 * max / HIST_BINS as f64;
    let mut counts = [0usize; HIST_BINS];
    for v in heads.iter().flat_map(|t| t.data()) {
        let b = (((v + max) / width).floor() as usize).min(HIST_BINS - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(bin, &count)| HistRow {
            model,
            layer,
            tensor,
            bin,
            lo: -max + bin as f64 * width,
            hi: -max + (bin + 1) as f64 * width,
            count,
        })
        .collect()
}

fn head_average(heads: &[Tensor]) -> Vec<f64> {
    let mut avg = vec![0.0; heads[0].len()];
    for h in heads {
        avg.iter_mut().zip(h.data()).for_each(|(a, v)| *a += v);
    }
    let n = heads.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

fn layer_scores(heads: &[Tensor], tokens: usize) -> Vec<f64> {
    let maps: Vec<&[f64]> = heads.iter().map(Tensor::data).collect();
    first_column_scores(&maps, tokens)
}

/// Writes the five CSV dumps for the checkpoint's teacher and student.
pub fn inspect(cfg: &RunConfig, out: &Output) -> CmdResult<String> {
    let state = load_checkpoint(cfg, out)?;
    let m = &state.cfg;
    let batch = inspect_batch(cfg, &state)?;
    let t = batch.len;
    let teacher = capture(m, &state.teacher, &batch, None)?;
    let student = capture(
        m,
        &state.student,
        &batch,
        Some(StudentQuant {
            weight_bits: m.weight_bits,
            plan: m.plan_mode(),
            precision: Precision::Integer,
            scales: ScaleSource::Frozen(&state.scales),
        }),
    )?;

    let mut stats = Vec::new();
    for l in 0..m.layers {
        for h in 0..m.heads {
            stats.push(StatsRow {
                layer: l,
                head: h,
                teacher_q_var: variance(teacher.q[l][h].data()),
                teacher_k_var: variance(teacher.k[l][h].data()),
                student_q_var: variance(student.q[l][h].data()),
                student_k_var: variance(student.k[l][h].data()),
            });
        }
    }

    let mut hist = Vec::new();
    let mut attn = Vec::new();
    let mut scores = Vec::new();
    for (model, cap) in [("teacher", &teacher), ("student", &student)] {
        for l in 0..m.layers {
            hist.extend(histogram(model, l, "q", &cap.q[l]));
            hist.extend(histogram(model, l, "k", &cap.k[l]));
            for (i, &prob) in head_average(&cap.attn[l]).iter().enumerate() {
                attn.push(AttnRow {
                    model,
                    layer: l,
                    row: i / t,
                    col: i % t,
                    prob,
                });
            }
            for (token, score) in layer_scores(&cap.attn[l], t).into_iter().enumerate() {
                scores.push(ScoreRow {
                    model,
                    layer: l,
                    token,
                    score,
                });
            }
        }
    }

    let mut plans = Vec::new();
    for (l, plan) in student.plans.iter().enumerate() {
        let source = (l > 0).then(|| layer_scores(&student.attn[l - 1], t));
        for (token, &hi) in plan.iter().enumerate() {
            plans.push(PlanRow {
                layer: l,
                token,
                score: source.as_ref().map(|s| s[token]),
                bits: if hi { 8 } else { 4 },
            });
        }
    }

    let files = ["qk_stats.csv", "qk_hist.csv", "attention_avg.csv", "first_column.csv", "bit_plans.csv"];
    write_csv(&out.path(files[0]), &stats)?;
    write_csv(&out.path(files[1]), &hist)?;
    write_csv(&out.path(files[2]), &attn)?;
    write_csv(&out.path(files[3]), &scores)?;
    write_csv(&out.path(files[4]), &plans)?;
    out.manifest("inspect", &files)?;
    Ok(format!("{} tokens over {} layers", t, m.layers))
}
