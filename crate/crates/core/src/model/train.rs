use serde::{Deserialize, Serialize};

use super::config::MicroTransformerConfig;
use super::corpus::{Batch, Corpus};
use super::forward::{forward, ActScales, Precision, QuantTrace, ScaleSource, StudentQuant};
use super::params::Params;
use super::ModelError;
use crate::gradtape::{Tape, Tensor, Var};
use crate::losses::{
    distill_loss, distribution_loss_tape, entropy_loss_tape, total_loss, total_loss_tape, Alignment, GaussianStats,
    LossReport,
};
use crate::quant::FakeQuantMode;

/// Per-step batch stream names.
pub const TEACHER_BATCHES: &str = "teacher-batch";
pub const STUDENT_BATCHES: &str = "student-batch";

/// Full-precision outputs used as distillation targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    /// `[layer][head]`, each `[R, T]`.
    pub attn: Vec<Vec<Tensor>>,
}

pub fn teacher_outputs(
    cfg: &MicroTransformerConfig,
    teacher: &Params,
    batch: &Batch,
) -> Result<TeacherOutputs, ModelError> {
    let mut tape = Tape::new();
    let vars = teacher.bind(&mut tape, false);
    let pass = forward(&mut tape, cfg, &vars, batch, None)?;
    let attn = pass
        .attn
        .iter()
        .map(|heads| heads.iter().map(|&a| tape.value(a).clone()).collect())
        .collect();
    Ok(TeacherOutputs {
        logits: tape.value(pass.logits).clone(),
        attn,
    })
}

/// One evaluation of the combined objective on the student.
#[derive(Clone, Debug)]
pub struct Objective {
    pub report: LossReport,
    pub stats: GaussianStats,
    pub trace: QuantTrace,
    /// Per parameter, in storage order; empty unless requested.
    pub grads: Vec<Option<Tensor>>,
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Records the student pass and every loss term on one tape.
pub fn student_objective(
    cfg: &MicroTransformerConfig,
    teacher: &TeacherOutputs,
    student: &Params,
    batch: &Batch,
    quant: StudentQuant<'_>,
    want_grads: bool,
) -> Result<Objective, ModelError> {
    let weights = cfg.loss_weights();
    let mut tape = Tape::new();
    let vars = student.bind(&mut tape, true);
    let pass = forward(&mut tape, cfg, &vars, batch, Some(quant))?;

    let t_logits = tape.constant(teacher.logits.clone());
    let distill = distill_loss(&mut tape, pass.logits, t_logits, &batch.targets, &weights)?;

    let qk: Vec<(Var, Var)> = pass
        .q
        .iter()
        .flatten()
        .copied()
        .zip(pass.k.iter().flatten().copied())
        .collect();
    let entropy = entropy_loss_tape(&mut tape, &qk, weights.eps)?;

    let mut pairs = Vec::new();
    for (s_layer, t_layer) in pass.attn.iter().zip(&teacher.attn) {
        for (&s, t) in s_layer.iter().zip(t_layer) {
            pairs.push((s, tape.constant(t.clone())));
        }
    }
    let (similarity, distribution) = distribution_loss_tape(&mut tape, &pairs, weights.eps, weights.alignment_sign)?;
    let total = total_loss_tape(&mut tape, distill.distill, entropy, distribution, &weights)?;

    let value = |v: Var| tape.value(v).item().expect("scalar loss node");
    let report = total_loss(
        value(distill.ce),
        value(distill.kl),
        value(entropy),
        Alignment {
            similarity: value(similarity),
            loss: value(distribution),
        },
        &weights,
    )?;
    debug_assert_eq!(report.total.to_bits(), value(total).to_bits());

    let stats = GaussianStats {
        layers: cfg.layers,
        heads: cfg.heads,
        q_var: qk.iter().map(|&(q, _)| population_variance(tape.value(q).data())).collect(),
        k_var: qk.iter().map(|&(_, k)| population_variance(tape.value(k).data())).collect(),
    };
    let grads = if want_grads {
        let g = tape.backward(total)?;
        vars.iter().map(|&v| g.get(v).cloned()).collect()
    } else {
        Vec::new()
    };
    Ok(Objective {
        report,
        stats,
        trace: pass.trace,
        grads,
    })
}

/// Teacher, student and calibration state of a distillation run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: MicroTransformerConfig,
    pub teacher: Params,
    pub student: Params,
    pub scales: ActScales,
    pub step: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: LossReport,
}

impl TrainState {
    /// Student starts as a copy of the teacher.
    pub fn new(cfg: MicroTransformerConfig, teacher: Params) -> Self {
        let scales = ActScales::new(cfg.ema_momentum);
        Self {
            student: teacher.clone(),
            teacher,
            scales,
            step: 0,
            cfg,
        }
    }

    pub fn quant(&mut self, precision: Precision) -> StudentQuant<'_> {
        StudentQuant {
            weight_bits: self.cfg.weight_bits,
            plan: self.cfg.plan_mode(),
            precision,
            scales: ScaleSource::Update(&mut self.scales),
        }
    }
}

/// One SGD step on the combined objective; plans and scales follow the
/// current student.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport, ModelError> {
    let cfg = state.cfg.clone();
    let teacher = teacher_outputs(&cfg, &state.teacher, batch)?;
    let student = state.student.clone();
    let quant = state.quant(Precision::Fake(FakeQuantMode::Round));
    let obj = student_objective(&cfg, &teacher, &student, batch, quant, true).map_err(|e| match e {
        ModelError::Loss(inner) => ModelError::NonFinite {
            step: state.step,
            detail: inner.to_string(),
        },
        other => other,
    })?;
    state.student.sgd_step(&obj.grads, cfg.lr);
    state.step += 1;
    Ok(obj.report)
}

/// Runs the remaining student steps, handing each record to `log`.
pub fn run_qat(
    state: &mut TrainState,
    corpus: &Corpus,
    mut log: impl FnMut(&StepRecord),
) -> Result<(), ModelError> {
    while state.step < state.cfg.steps {
        let batch = Batch::sample(
            &corpus.train,
            state.cfg.batch,
            state.cfg.seq_len,
            state.cfg.seed,
            STUDENT_BATCHES,
            state.step as u64,
        );
        let step = state.step;
        let report = train_step(state, &batch)?;
        log(&StepRecord { step, report });
    }
    Ok(())
}

/// Full-precision cross-entropy training of the teacher from initialization.
/// Returns the parameters and the per-step loss.
pub fn pretrain_teacher(cfg: &MicroTransformerConfig, corpus: &Corpus) -> Result<(Params, Vec<f64>), ModelError> {
    let mut params = Params::init(cfg, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.teacher_steps);
    for step in 0..cfg.teacher_steps {
        let batch = Batch::sample(&corpus.train, cfg.batch, cfg.seq_len, cfg.seed, TEACHER_BATCHES, step as u64);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let pass = forward(&mut tape, cfg, &vars, &batch, None)?;
        let ce = tape.cross_entropy(pass.logits, &batch.targets)?;
        let loss = tape.value(ce).item().expect("scalar");
        if !loss.is_finite() {
            return Err(ModelError::NonFinite {
                step,
                detail: format!("teacher cross-entropy {loss}"),
            });
        }
        let g = tape.backward(ce)?;
        let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| g.get(v).cloned()).collect();
        params.sgd_step(&grads, cfg.teacher_lr);
        losses.push(loss);
    }
    Ok((params, losses))
}
