//! Micro decoder-only transformer: full-precision teacher, fake-quantized
//! student with token-adaptive activation widths, distillation training,
//! evaluation, checkpoints and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod forward;
pub mod gradcheck;
pub mod params;
pub mod train;

use thiserror::Error;

pub use config::{ActBits, MicroTransformerConfig, PlanMode};
pub use corpus::{Batch, Corpus, BOS};
pub use eval::{perplexity_eval, EvalResult};
pub use forward::{forward, ActScales, Pass, Precision, QuantTrace, ScaleSource, StudentQuant};
pub use params::{Layout, Params, Slot};
pub use train::{
    pretrain_teacher, run_qat, student_objective, teacher_outputs, train_step, Objective, StepRecord,
    TeacherOutputs, TrainState,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config field {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds the maximum {max}")]
    Length { len: usize, max: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tape(#[from] crate::gradtape::TapeError),
    #[error(transparent)]
    Quant(#[from] crate::quant::QuantError),
    #[error(transparent)]
    Kernel(#[from] crate::kernels::KernelError),
    #[error(transparent)]
    TokenControl(#[from] crate::token_control::TokenError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}
