//! One function per subcommand. Each writes its outputs into `out`, finishes
//! with a manifest, and returns a short human-readable summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use squant::kernels::verify::{verify_kernels, Fault};
use squant::kernels::{
    gemm_i4_packed, gemm_i8, gemm_mixed, pack_int4, ActivationGroups, CostCounter, Int8Matrix, MixedScales,
    WeightOperand,
};
use squant::model::ablation::{full_grid, run_ablation, CellSummary, RunResult};
use squant::model::{checkpoint, perplexity_eval, pretrain_teacher, run_qat, Corpus, TrainState};
use squant::rng;
use squant::token_control::high_count;

use crate::config::{RunConfig, Shape};
use crate::{write_csv, write_json, write_manifest, CmdResult, Failure};

pub const CHECKPOINT_FILE: &str = "checkpoint.sqnt";

/// Where and under which config hash a command writes.
pub struct Output {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl Output {
    pub fn create(dir: &Path, cfg: &RunConfig) -> CmdResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::usage(anyhow::anyhow!("creating {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: cfg.hash(),
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn manifest(&self, command: &str, files: &[&str]) -> CmdResult<()> {
        write_manifest(&self.dir, command, &self.config_hash, files)
    }
}

/// Reads the configured corpus file, or generates the synthetic one.
pub fn load_corpus(cfg: &RunConfig) -> CmdResult<Corpus> {
    let m = &cfg.model;
    match &cfg.corpus {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(anyhow::anyhow!("reading corpus {}: {e}", path.display())))?;
            Corpus::from_text(&text, m.vocab, m.seq_len).map_err(Failure::usage)
        }
        None => Corpus::synthetic(m.seed, m.corpus_chars, m.vocab, m.seq_len).map_err(Failure::usage),
    }
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    config_hash: &'a str,
    passed: bool,
    #[serde(flatten)]
    report: &'a squant::kernels::verify::VerifyReport,
}

/// Runs the randomized bit-exactness suite. Fails with a reproducer on the
/// first mismatching case.
pub fn verify(cfg: &RunConfig, out: &Output, fault: Option<Fault>) -> CmdResult<String> {
    let seed = cfg.model.seed;
    let report = verify_kernels(seed, cfg.verify_cases, fault);
    write_json(
        &out.path("verify.json"),
        &VerifyOutput {
            config_hash: &out.config_hash,
            passed: report.passed(),
            report: &report,
        },
    )?;
    out.manifest("verify-kernels", &["verify.json"])?;
    match report.mismatches.first() {
        None => Ok(format!("{} cases passed (seed {seed})", report.cases)),
        Some(m) => Err(Failure::check(anyhow::anyhow!(
            "{} mismatches; first: kernel {} case {} (seed {}, M={} K={} N={}) at [{}, {}]: expected {}, got {}\n\
             reproduce with: squant verify-kernels --seed {} --cases {}",
            report.mismatches.len(),
            m.kernel,
            m.case,
            m.seed,
            m.m,
            m.k,
            m.n,
            m.row,
            m.col,
            m.expected,
            m.actual,
            m.seed,
            m.case + 1
        ))),
    }
}

/// One benchmark row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kernel: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub n_hi: usize,
    pub n_lo: usize,
    pub mul_count: u64,
    pub add_count: u64,
    pub wall_ns_median: u64,
}

pub const BENCH_HEADER: &str = "kernel,m,k,n,n_hi,n_lo,mul_count,add_count,wall_ns_median";

fn median_ns(reps: usize, timing: bool, mut f: impl FnMut()) -> u64 {
    if !timing {
        f();
        return 0;
    }
    let mut times: Vec<u64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2]
}

/// Cost and timing rows for every shape: byte-level, packed, and mixed at
/// `bench_rho`. Without `timing` the wall-clock column is zero so the report
/// is reproducible.
pub fn bench_rows(cfg: &RunConfig, timing: bool) -> CmdResult<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (i, &Shape { m, k, n }) in cfg.bench_shapes.iter().enumerate() {
        let mut r = rng::substream(cfg.model.seed, "gemm-bench", i as u64);
        let w = Int8Matrix::from_fn(m, k, |_, _| r.random_range(-8..=7));
        let x8 = Int8Matrix::from_fn(k, n, |_, _| r.random());
        let x4 = Int8Matrix::from_fn(k, n, |_, _| r.random_range(-8..=7));
        let packed = pack_int4(&w).map_err(Failure::check)?;
        let row = |kernel, n_hi, n_lo, cost: CostCounter, ns| BenchRow {
            kernel,
            m,
            k,
            n,
            n_hi,
            n_lo,
            mul_count: cost.mul_count,
            add_count: cost.add_count,
            wall_ns_median: ns,
        };

        let mut cost = CostCounter::default();
        gemm_i8(&w, &x8, &mut cost).map_err(Failure::check)?;
        let ns = median_ns(cfg.bench_reps, timing, || {
            gemm_i8(&w, &x8, &mut CostCounter::default()).expect("validated above");
        });
        rows.push(row("i8", n, 0, cost, ns));

        let mut cost = CostCounter::default();
        gemm_i4_packed(&packed, &x4, &mut cost).map_err(Failure::check)?;
        let ns = median_ns(cfg.bench_reps, timing, || {
            gemm_i4_packed(&packed, &x4, &mut CostCounter::default()).expect("validated above");
        });
        rows.push(row("i4_packed", 0, n, cost, ns));

        let n_hi = high_count(cfg.bench_rho, n);
        let hi_index: Vec<usize> = (0..n_hi).collect();
        let lo_index: Vec<usize> = (n_hi..n).collect();
        let groups = ActivationGroups::new(x8.select_cols(&hi_index), x4.select_cols(&lo_index), hi_index, lo_index)
            .map_err(Failure::check)?;
        let operand = WeightOperand::Int4(packed.clone());
        let scales = MixedScales {
            weight: 1.0,
            hi: 1.0,
            lo: 1.0,
        };
        let mut cost = CostCounter::default();
        gemm_mixed(&operand, &groups, scales, &mut cost).map_err(Failure::check)?;
        let ns = median_ns(cfg.bench_reps, timing, || {
            gemm_mixed(&operand, &groups, scales, &mut CostCounter::default()).expect("validated above");
        });
        rows.push(row("mixed", n_hi, n - n_hi, cost, ns));
    }
    Ok(rows)
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    config_hash: &'a str,
    reps: usize,
    timing: bool,
    rows: &'a [BenchRow],
}

pub fn gemm_bench(cfg: &RunConfig, out: &Output, timing: bool) -> CmdResult<String> {
    let rows = bench_rows(cfg, timing)?;
    write_csv(&out.path("gemm_bench.csv"), &rows)?;
    write_json(
        &out.path("gemm_bench.json"),
        &BenchOutput {
            config_hash: &out.config_hash,
            reps: cfg.bench_reps,
            timing,
            rows: &rows,
        },
    )?;
    out.manifest("gemm-bench", &["gemm_bench.csv", "gemm_bench.json"])?;
    let mut summary = String::new();
    for pair in rows.chunks(3) {
        summary.push_str(&format!(
            "{}x{}x{}: packed/byte mul ratio {:.3}\n",
            pair[0].m,
            pair[0].k,
            pair[0].n,
            pair[1].mul_count as f64 / pair[0].mul_count as f64
        ));
    }
    Ok(summary.trim_end().to_string())
}

/// Teacher and student perplexities on held-out text.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub step: usize,
    pub teacher_ppl: f64,
    pub student_ppl: f64,
    pub student_mul_per_token: f64,
    pub heldout_tokens: usize,
}

fn evaluate(state: &TrainState, corpus: &Corpus, config_hash: &str) -> CmdResult<EvalSummary> {
    let teacher = perplexity_eval(&state.cfg, &state.teacher, &corpus.heldout, None).map_err(Failure::check)?;
    let student = perplexity_eval(&state.cfg, &state.student, &corpus.heldout, Some(&state.scales))
        .map_err(Failure::check)?;
    Ok(EvalSummary {
        config_hash: config_hash.to_string(),
        step: state.step,
        teacher_ppl: teacher.ppl,
        student_ppl: student.ppl,
        student_mul_per_token: student.mul_per_token,
        heldout_tokens: student.tokens,
    })
}

/// Pretrains the teacher, distills the quantized student, writes the
/// per-step log, the checkpoint and a held-out evaluation.
pub fn train(cfg: &RunConfig, out: &Output) -> CmdResult<String> {
    let corpus = load_corpus(cfg)?;
    let (teacher, _) = pretrain_teacher(&cfg.model, &corpus).map_err(Failure::check)?;
    let mut state = TrainState::new(cfg.model.clone(), teacher);
    let log_path = out.path("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(Failure::usage)?);
    let mut io_err = None;
    run_qat(&mut state, &corpus, |rec| {
        let line = serde_json::to_string(rec).expect("records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })
    .map_err(Failure::check)?;
    if let Some(e) = io_err {
        return Err(Failure::check(e));
    }
    log.flush().map_err(Failure::check)?;
    drop(log);
    checkpoint::save(&out.path(CHECKPOINT_FILE), &state).map_err(Failure::check)?;
    let summary = evaluate(&state, &corpus, &out.config_hash)?;
    write_json(&out.path("train_summary.json"), &summary)?;
    out.manifest("train", &["train_log.jsonl", CHECKPOINT_FILE, "train_summary.json"])?;
    Ok(format!(
        "{} steps; teacher ppl {:.4}, student ppl {:.4}",
        state.step, summary.teacher_ppl, summary.student_ppl
    ))
}

fn checkpoint_path(cfg: &RunConfig, out: &Output) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.path(CHECKPOINT_FILE))
}

pub fn load_checkpoint(cfg: &RunConfig, out: &Output) -> CmdResult<TrainState> {
    let path = checkpoint_path(cfg, out);
    if !path.exists() {
        return Err(Failure::usage(anyhow::anyhow!("checkpoint {} not found", path.display())));
    }
    checkpoint::load(&path).map_err(Failure::check)
}

/// Re-evaluates a saved checkpoint on the held-out split.
pub fn eval(cfg: &RunConfig, out: &Output) -> CmdResult<String> {
    let state = load_checkpoint(cfg, out)?;
    let mut data_cfg = cfg.clone();
    data_cfg.model = state.cfg.clone();
    let corpus = load_corpus(&data_cfg)?;
    let summary = evaluate(&state, &corpus, &out.config_hash)?;
    write_json(&out.path("eval.json"), &summary)?;
    out.manifest("eval", &["eval.json"])?;
    Ok(format!(
        "step {}; teacher ppl {:.4}, student ppl {:.4}",
        summary.step, summary.teacher_ppl, summary.student_ppl
    ))
}

#[derive(Serialize)]
struct CellRow {
    losses: String,
    acts: String,
    seeds: usize,
    ppl_mean: f64,
    ppl_min: f64,
    ppl_max: f64,
    mul_per_token: f64,
}

#[derive(Serialize)]
struct RunRow {
    losses: String,
    acts: String,
    seed: u64,
    ppl: f64,
    mul_per_token: f64,
    final_total: f64,
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    config_hash: &'a str,
    seeds: &'a [u64],
    cells: &'a [CellSummary],
    runs: &'a [RunResult],
}

/// Trains every loss-set by activation-width cell for every configured seed.
pub fn ablate(cfg: &RunConfig, out: &Output) -> CmdResult<String> {
    let corpus = load_corpus(cfg)?;
    let result = run_ablation(&cfg.model, &full_grid(), &cfg.ablation_seeds, &corpus).map_err(Failure::check)?;
    let cells: Vec<CellRow> = result
        .cells
        .iter()
        .map(|c| CellRow {
            losses: c.losses.to_string(),
            acts: c.acts.to_string(),
            seeds: c.seeds,
            ppl_mean: c.ppl_mean,
            ppl_min: c.ppl_min,
            ppl_max: c.ppl_max,
            mul_per_token: c.mul_per_token,
        })
        .collect();
    let runs: Vec<RunRow> = result
        .runs
        .iter()
        .map(|r| RunRow {
            losses: r.losses.to_string(),
            acts: r.acts.to_string(),
            seed: r.seed,
            ppl: r.ppl,
            mul_per_token: r.mul_per_token,
            final_total: r.final_total,
        })
        .collect();
    write_csv(&out.path("ablation.csv"), &cells)?;
    write_csv(&out.path("ablation_runs.csv"), &runs)?;
    write_json(
        &out.path("ablation.json"),
        &AblationOutput {
            config_hash: &out.config_hash,
            seeds: &cfg.ablation_seeds,
            cells: &result.cells,
            runs: &result.runs,
        },
    )?;
    out.manifest("ablate", &["ablation.csv", "ablation_runs.csv", "ablation.json"])?;
    Ok(format!("{} cells, {} runs", cells.len(), runs.len()))
}
