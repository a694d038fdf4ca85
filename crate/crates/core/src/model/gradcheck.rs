//! Finite-difference check of the student's end-to-end gradient.
//!
//! Scales and plans are frozen from a traced pass and every fake-quant node
//! runs in clip-only mode, so the network is piecewise smooth and its tape
//! gradient is the exact derivative away from clip boundaries.

use rand::Rng;
use serde::Serialize;

use super::config::MicroTransformerConfig;
use super::corpus::Batch;
use super::forward::{ActScales, Precision, QuantTrace, ScaleSource, StudentQuant};
use super::params::{Layout, Params, Slot};
use super::train::{student_objective, teacher_outputs, TeacherOutputs};
use super::ModelError;
use crate::quant::FakeQuantMode;
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-7;

/// Weights within this many quantization steps of the clip edge are skipped.
const CLIP_MARGIN: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradSample {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }
}

fn surrogate<'a>(cfg: &MicroTransformerConfig, trace: &'a QuantTrace) -> StudentQuant<'a> {
    StudentQuant {
        weight_bits: cfg.weight_bits,
        plan: cfg.plan_mode(),
        precision: Precision::Fake(FakeQuantMode::ClipOnly),
        scales: ScaleSource::Trace(trace),
    }
}

fn total(
    cfg: &MicroTransformerConfig,
    teacher: &TeacherOutputs,
    student: &Params,
    batch: &Batch,
    trace: &QuantTrace,
) -> Result<f64, ModelError> {
    Ok(student_objective(cfg, teacher, student, batch, surrogate(cfg, trace), false)?
        .report
        .total)
}

/// Whether `(index, elem)` is a quantized weight sitting on its clip edge.
fn on_clip_edge(cfg: &MicroTransformerConfig, params: &Params, trace: &QuantTrace, index: usize, elem: usize) -> bool {
    let lay = Layout::new(cfg.layers);
    for l in 0..cfg.layers {
        for slot in Slot::LINEAR {
            if lay.layer(l, slot) == index {
                let alpha = trace.weight[&format!("layers.{l}.{}", slot.name())];
                let u = params.get(index).data()[elem] / alpha;
                let (lo, hi) = (cfg.weight_bits.qmin() as f64, cfg.weight_bits.qmax() as f64);
                return u >= hi - CLIP_MARGIN || u <= lo + CLIP_MARGIN;
            }
        }
    }
    false
}

/// Compares tape gradients with central differences on `samples` parameter
/// elements drawn from the `"gradcheck"` stream of `seed`.
pub fn check_gradients(
    cfg: &MicroTransformerConfig,
    teacher: &Params,
    student: &Params,
    scales: &ActScales,
    batch: &Batch,
    samples: usize,
    seed: u64,
) -> Result<GradCheck, ModelError> {
    let t_out = teacher_outputs(cfg, teacher, batch)?;
    let frozen = StudentQuant {
        weight_bits: cfg.weight_bits,
        plan: cfg.plan_mode(),
        precision: Precision::Fake(FakeQuantMode::ClipOnly),
        scales: ScaleSource::Frozen(scales),
    };
    let trace = student_objective(cfg, &t_out, student, batch, frozen, false)?.trace;
    let obj = student_objective(cfg, &t_out, student, batch, surrogate(cfg, &trace), true)?;

    let mut r = rng::stream(seed, "gradcheck");
    let mut out = Vec::with_capacity(samples);
    let mut attempts = 0;
    while out.len() < samples {
        attempts += 1;
        if attempts > samples * 1000 {
            return Err(ModelError::GradCheck(format!("only {} eligible elements found", out.len())));
        }
        let index = r.random_range(0..student.len());
        let elem = r.random_range(0..student.get(index).len());
        let Some(g) = obj.grads[index].as_ref() else { continue };
        if on_clip_edge(cfg, student, &trace, index, elem) {
            continue;
        }
        let analytic = g.data()[elem];
        let w = student.get(index).data()[elem];
        let plus = total(cfg, &t_out, &student.with_element(index, elem, w + FD_STEP), batch, &trace)?;
        let minus = total(cfg, &t_out, &student.with_element(index, elem, w - FD_STEP), batch, &trace)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        out.push(GradSample {
            param: student.name(index).to_string(),
            element: elem,
            analytic,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheck { samples: out })
}
