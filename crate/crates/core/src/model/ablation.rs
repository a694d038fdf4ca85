//! Loss-term and activation-width ablation grid.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{ActBits, MicroTransformerConfig};
use super::corpus::Corpus;
use super::eval::perplexity_eval;
use super::params::Params;
use super::train::{pretrain_teacher, run_qat, TrainState};
use super::ModelError;
use crate::losses::LossWeights;
use crate::par::{self, Exec};
use crate::quant::BitWidth;

/// Which auxiliary terms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSet {
    None,
    Entropy,
    Distribution,
    Both,
}

impl LossSet {
    pub const ALL: [LossSet; 4] = [LossSet::None, LossSet::Entropy, LossSet::Distribution, LossSet::Both];

    /// `(r_e, r_d)` for this set, using the default weights where enabled.
    pub fn weights(self) -> (f64, f64) {
        let w = LossWeights::default();
        match self {
            LossSet::None => (0.0, 0.0),
            LossSet::Entropy => (w.r_e, 0.0),
            LossSet::Distribution => (0.0, w.r_d),
            LossSet::Both => (w.r_e, w.r_d),
        }
    }
}

impl fmt::Display for LossSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossSet::None => "none",
            LossSet::Entropy => "entropy",
            LossSet::Distribution => "distribution",
            LossSet::Both => "both",
        })
    }
}

/// Activation width setting of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActSetting {
    A4,
    A8,
    Adaptive { rho: f64 },
}

impl ActSetting {
    pub fn standard() -> Vec<ActSetting> {
        vec![
            ActSetting::A4,
            ActSetting::A8,
            ActSetting::Adaptive { rho: 0.25 },
            ActSetting::Adaptive { rho: 0.5 },
            ActSetting::Adaptive { rho: 0.75 },
        ]
    }
}

impl fmt::Display for ActSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActSetting::A4 => f.write_str("A4"),
            ActSetting::A8 => f.write_str("A8"),
            ActSetting::Adaptive { rho } => write!(f, "adaptive_{rho}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub losses: LossSet,
    pub acts: ActSetting,
}

impl Cell {
    /// `base` with this cell's loss weights and activation policy at `seed`.
    pub fn config(&self, base: &MicroTransformerConfig, seed: u64) -> MicroTransformerConfig {
        let (r_e, r_d) = self.losses.weights();
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.r_e = r_e;
        cfg.r_d = r_d;
        match self.acts {
            ActSetting::A4 => cfg.act_bits = ActBits::Uniform(BitWidth::Four),
            ActSetting::A8 => cfg.act_bits = ActBits::Uniform(BitWidth::Eight),
            ActSetting::Adaptive { rho } => {
                cfg.act_bits = ActBits::Adaptive;
                cfg.rho = rho;
            }
        }
        cfg
    }
}

/// Every loss set crossed with every activation setting.
pub fn full_grid() -> Vec<Cell> {
    LossSet::ALL
        .iter()
        .flat_map(|&losses| ActSetting::standard().into_iter().map(move |acts| Cell { losses, acts }))
        .collect()
}

/// One trained and evaluated student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub losses: LossSet,
    pub acts: ActSetting,
    pub seed: u64,
    pub ppl: f64,
    pub mul_per_token: f64,
    pub final_total: f64,
}

/// Seed aggregate of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub losses: LossSet,
    pub acts: ActSetting,
    pub seeds: usize,
    pub ppl_mean: f64,
    pub ppl_min: f64,
    pub ppl_max: f64,
    pub mul_per_token: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub runs: Vec<RunResult>,
    pub cells: Vec<CellSummary>,
}

impl Ablation {
    /// Runs of one cell, in seed order.
    pub fn runs_of(&self, cell: Cell) -> Vec<&RunResult> {
        self.runs
            .iter()
            .filter(|r| r.losses == cell.losses && r.acts == cell.acts)
            .collect()
    }
}

/// Trains a student from `teacher` under `cfg` and evaluates it on held-out text.
pub fn train_and_eval(cfg: &MicroTransformerConfig, teacher: &Params, corpus: &Corpus) -> Result<(TrainState, f64, f64, f64), ModelError> {
    let mut state = TrainState::new(cfg.clone(), teacher.clone());
    let mut last = f64::NAN;
    run_qat(&mut state, corpus, |r| last = r.report.total)?;
    let eval = perplexity_eval(cfg, &state.student, &corpus.heldout, Some(&state.scales))?;
    Ok((state, eval.ppl, eval.mul_per_token, last))
}

/// Pretrains one teacher per seed, then trains every `(cell, seed)` student.
pub fn run_ablation(
    base: &MicroTransformerConfig,
    cells: &[Cell],
    seeds: &[u64],
    corpus: &Corpus,
) -> Result<Ablation, ModelError> {
    base.validate()?;
    let teachers = par::map_range(seeds.len(), Exec::default(), |i| {
        let mut cfg = base.clone();
        cfg.seed = seeds[i];
        pretrain_teacher(&cfg, corpus).map(|(p, _)| p)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let jobs: Vec<(Cell, usize)> = cells
        .iter()
        .flat_map(|&c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let runs = par::map_range(jobs.len(), Exec::default(), |j| {
        let (cell, s) = jobs[j];
        let cfg = cell.config(base, seeds[s]);
        let (_, ppl, mul_per_token, final_total) = train_and_eval(&cfg, &teachers[s], corpus)?;
        Ok::<_, ModelError>(RunResult {
            losses: cell.losses,
            acts: cell.acts,
            seed: seeds[s],
            ppl,
            mul_per_token,
            final_total,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let cells = cells
        .iter()
        .map(|&cell| {
            let ppl: Vec<f64> = runs
                .iter()
                .filter(|r| r.losses == cell.losses && r.acts == cell.acts)
                .map(|r| r.ppl)
                .collect();
            let muls: Vec<f64> = runs
                .iter()
                .filter(|r| r.losses == cell.losses && r.acts == cell.acts)
                .map(|r| r.mul_per_token)
                .collect();
            let n = ppl.len().max(1) as f64;
            CellSummary {
                losses: cell.losses,
                acts: cell.acts,
                seeds: ppl.len(),
                ppl_mean: ppl.iter().sum::<f64>() / n,
                ppl_min: ppl.iter().copied().fold(f64::INFINITY, f64::min),
                ppl_max: ppl.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mul_per_token: muls.iter().sum::<f64>() / n,
            }
        })
        .collect();
    Ok(Ablation { runs, cells })
}
