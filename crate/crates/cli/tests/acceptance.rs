//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p squant-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng;
use squant::gradtape::{Tape, Tensor};
use squant::kernels::verify::verify_kernels;
use squant::losses::{
    distribution_loss, distribution_loss_tape, entropy_loss, entropy_loss_tape, qk_stats, AlignmentSign,
    GaussianStats, DEFAULT_EPS,
};
use squant::model::ablation::{run_ablation, ActSetting, Cell, LossSet, RunResult};
use squant::model::gradcheck::check_gradients;
use squant::model::{
    forward, perplexity_eval, pretrain_teacher, run_qat, train_step, ActBits, Batch, Corpus, MicroTransformerConfig,
    Precision, ScaleSource, StepRecord, StudentQuant, TrainState,
};
use squant::quant::{calibrate_scale, dequantize, quantize, BitWidth, FakeQuantMode, QuantSpec, QuantTarget};
use squant::rng;
use squant::token_control::AttentionMap;
use squant_cli::commands::bench_rows;
use squant_cli::{RunConfig, Shape};

type Verdict = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_model() -> MicroTransformerConfig {
    MicroTransformerConfig {
        d_model: 16,
        vocab: 16,
        seq_len: 8,
        batch: 2,
        corpus_chars: 3000,
        steps: 6,
        teacher_steps: 30,
        ..MicroTransformerConfig::default()
    }
}

fn corpus_for(cfg: &MicroTransformerConfig) -> Corpus {
    Corpus::synthetic(cfg.seed, cfg.corpus_chars, cfg.vocab, cfg.seq_len).expect("synthetic corpus")
}

fn trained(cfg: &MicroTransformerConfig) -> (TrainState, Vec<StepRecord>) {
    let c = corpus_for(cfg);
    let (teacher, _) = pretrain_teacher(cfg, &c).expect("teacher");
    let mut state = TrainState::new(cfg.clone(), teacher);
    let mut log = Vec::new();
    run_qat(&mut state, &c, |r| log.push(r.clone())).expect("student");
    (state, log)
}

fn ac1_bit_exact() -> Verdict {
    let start = Instant::now();
    let report = verify_kernels(0, 1000, None);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        report.cases == 1000 && report.passed() && secs < 10.0,
        format!("{} cases, {} mismatches, {secs:.2} s", report.cases, report.mismatches.len()),
    )
}

fn ac2_cost_halving() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.bench_shapes.extend([
        Shape { m: 2, k: 1, n: 1 },
        Shape { m: 8, k: 31, n: 5 },
        Shape { m: 16, k: 62, n: 17 },
        Shape { m: 64, k: 200, n: 3 },
    ]);
    let rows = bench_rows(&cfg, false).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for shape in rows.chunks(3) {
        let (byte, packed) = (&shape[0], &shape[1]);
        if byte.m % 2 == 0 {
            checked += 1;
            if 2 * packed.mul_count != byte.mul_count {
                return Err(format!(
                    "{}x{}x{}: packed {} vs byte {}",
                    byte.m, byte.k, byte.n, packed.mul_count, byte.mul_count
                ));
            }
        }
    }
    ensure(checked == cfg.bench_shapes.len(), format!("ratio 0.5 exactly on {checked} even-M shapes"))
}

fn ac3_quantizer_contract() -> Verdict {
    let mut r = rng::stream(3, "acceptance-quantizer");
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let bits = if i % 2 == 0 { BitWidth::Four } else { BitWidth::Eight };
        let n = r.random_range(1..=64);
        let magnitude = 10f64.powf(r.random_range(-3.0..3.0));
        let x = Tensor::new(vec![n], (0..n).map(|_| r.random_range(-1.0..1.0) * magnitude).collect())
            .map_err(|e| e.to_string())?;
        let alpha = calibrate_scale(&x, bits, None);
        let spec = QuantSpec::new(bits, alpha, QuantTarget::Activation).map_err(|e| e.to_string())?;
        let q = quantize(&x, &spec);
        if q.ints().iter().any(|&v| (v as i32) < bits.qmin() || (v as i32) > bits.qmax()) {
            return Err(format!("tensor {i}: integer outside the {}-bit range", bits.bits()));
        }
        let back = dequantize(&q);
        for (a, b) in x.data().iter().zip(back.data()) {
            let err = (a - b).abs();
            if err > alpha / 2.0 {
                return Err(format!("tensor {i}: error {err} exceeds half-step {}", alpha / 2.0));
            }
            worst = worst.max(err / alpha);
        }
        if quantize(&back, &spec) != q {
            return Err(format!("tensor {i}: quantization is not idempotent"));
        }
    }
    Ok(format!("10000 tensors; worst error {worst:.6} steps"))
}

fn ac4_ste_gradients() -> Verdict {
    let cfg = small_model();
    let (state, _) = trained(&cfg);
    let c = corpus_for(&cfg);
    let batch = Batch::sample(&c.train, cfg.batch, cfg.seq_len, cfg.seed, "acceptance-gradcheck", 0);
    let check = check_gradients(&cfg, &state.teacher, &state.student, &state.scales, &batch, 24, 4)
        .map_err(|e| e.to_string())?;
    let worst = check.max_rel_err();
    ensure(
        check.samples.len() >= 20 && worst <= 2e-2,
        format!("{} samples, max relative error {worst:.2e}", check.samples.len()),
    )
}

fn logits(state: &TrainState, batch: &Batch, precision: Precision) -> Tensor {
    let cfg = &state.cfg;
    let mut tape = Tape::new();
    let vars = state.student.bind(&mut tape, false);
    let quant = StudentQuant {
        weight_bits: cfg.weight_bits,
        plan: cfg.plan_mode(),
        precision,
        scales: ScaleSource::Frozen(&state.scales),
    };
    let pass = forward(&mut tape, cfg, &vars, batch, Some(quant)).expect("forward");
    tape.value(pass.logits).clone()
}

fn ac5_degenerate_plans() -> Verdict {
    let base = small_model();
    let c = corpus_for(&base);
    let batch = Batch::sample(&c.heldout, 2, base.seq_len, 0, "acceptance-plans", 0);
    for (rho, bits) in [(1.0, BitWidth::Eight), (0.0, BitWidth::Four)] {
        let adaptive = MicroTransformerConfig {
            act_bits: ActBits::Adaptive,
            rho,
            ..base.clone()
        };
        let uniform = MicroTransformerConfig {
            act_bits: ActBits::Uniform(bits),
            ..base.clone()
        };
        let (a, log_a) = trained(&adaptive);
        let (u, log_u) = trained(&uniform);
        if log_a != log_u || a.student != u.student {
            return Err(format!("rho={rho}: training diverged from A{}", bits.bits()));
        }
        for precision in [Precision::Fake(FakeQuantMode::Round), Precision::Integer] {
            let (x, y) = (logits(&a, &batch, precision), logits(&u, &batch, precision));
            let same = x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            if !same {
                return Err(format!("rho={rho}: {precision:?} logits differ from A{}", bits.bits()));
            }
        }
    }
    Ok("rho=1 matches A8 and rho=0 matches A4 bit for bit".into())
}

fn ac6_closed_forms() -> Verdict {
    let stats = GaussianStats {
        layers: 1,
        heads: 1,
        q_var: vec![1.0],
        k_var: vec![1.0],
    };
    let le = entropy_loss(&stats, 1e-300).map_err(|e| e.to_string())?;
    let expected = -(2f64.ln().ln());
    let (l, h, n) = (3, 2, 5);
    let mut r = rng::stream(6, "acceptance-maps");
    let mut probs = Vec::new();
    for _ in 0..l * h {
        for i in 0..n {
            let mut row: Vec<f64> = (0..n).map(|j| if j <= i { r.random_range(0.1..1.0) } else { 0.0 }).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            probs.extend(row);
        }
    }
    let map = AttentionMap::new(l, h, n, probs).map_err(|e| e.to_string())?;
    let sim = distribution_loss(&map, &map, DEFAULT_EPS, AlignmentSign::Negated)
        .map_err(|e| e.to_string())?
        .similarity;
    ensure(
        (le - expected).abs() <= 1e-6 && (sim - (l * h) as f64).abs() <= 1e-6,
        format!("L_E {le:.9} vs {expected:.9}; similarity {sim:.9} vs {}", l * h),
    )
}

fn uniform_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).expect("finite")
}

fn sgd(t: &Tensor, g: &Tensor, lr: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect()).expect("finite")
}

fn variance_sum(q: &Tensor, k: &Tensor, heads: usize) -> f64 {
    let view = |t: &Tensor| t.reshape(vec![1, heads, t.rows() / heads, t.cols()]).expect("layout");
    let s = qk_stats(&view(q), &view(k)).expect("stats");
    s.q_var.iter().zip(&s.k_var).map(|(a, b)| (1.0 + a * b).ln()).sum()
}

fn ac7_descent_direction() -> Verdict {
    let (heads, rows, dh) = (2, 8, 4);
    let mut details = Vec::new();
    for seed in 0..5 {
        let mut r = rng::substream(seed, "acceptance-descent", 0);
        let (mut q, mut k) = (uniform_tensor(&mut r, &[heads * rows, dh], 0.8), uniform_tensor(&mut r, &[heads * rows, dh], 0.8));
        let start = variance_sum(&q, &k, heads);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let (qv, kv) = (tape.param(q.clone()), tape.param(k.clone()));
            let pairs: Vec<_> = (0..heads)
                .map(|h| {
                    let qh = tape.slice(qv, h * rows..(h + 1) * rows, 0..dh).expect("slice");
                    let kh = tape.slice(kv, h * rows..(h + 1) * rows, 0..dh).expect("slice");
                    (qh, kh)
                })
                .collect();
            let loss = entropy_loss_tape(&mut tape, &pairs, DEFAULT_EPS).map_err(|e| e.to_string())?;
            let g = tape.backward(loss).map_err(|e| e.to_string())?;
            q = sgd(&q, g.get(qv).expect("grad"), 1e-2);
            k = sgd(&k, g.get(kv).expect("grad"), 1e-2);
        }
        let end = variance_sum(&q, &k, heads);
        if end <= start {
            return Err(format!("seed {seed}: entropy objective {start:.6} -> {end:.6}"));
        }

        let n = 6;
        let mut r = rng::substream(seed, "acceptance-descent", 1);
        let mut tape = Tape::new();
        let t_logits = tape.constant(uniform_tensor(&mut r, &[n, n], 3.0));
        let t_map = tape.softmax_rows(t_logits, true).map_err(|e| e.to_string())?;
        let target = tape.value(t_map).clone();
        let mut s_logits = uniform_tensor(&mut r, &[n, n], 3.0);
        let similarity = |s_logits: &Tensor| -> Result<(f64, Option<Tensor>), String> {
            let mut tape = Tape::new();
            let lv = tape.param(s_logits.clone());
            let s = tape.softmax_rows(lv, true).map_err(|e| e.to_string())?;
            let t = tape.constant(target.clone());
            let (sim, loss) = distribution_loss_tape(&mut tape, &[(s, t)], DEFAULT_EPS, AlignmentSign::Negated)
                .map_err(|e| e.to_string())?;
            let g = tape.backward(loss).map_err(|e| e.to_string())?;
            Ok((tape.value(sim).item().expect("scalar"), g.get(lv).cloned()))
        };
        let (sim_start, _) = similarity(&s_logits)?;
        for _ in 0..50 {
            let (_, g) = similarity(&s_logits)?;
            s_logits = sgd(&s_logits, &g.expect("grad"), 0.5);
        }
        let (sim_end, _) = similarity(&s_logits)?;
        if sim_end <= sim_start {
            return Err(format!("seed {seed}: similarity {sim_start:.6} -> {sim_end:.6}"));
        }
        details.push(format!("{:.2}->{:.2}/{:.3}->{:.3}", start, end, sim_start, sim_end));
    }
    Ok(format!("5/5 seeds rise: {}", details.join(", ")))
}

struct Grid {
    seeds: Vec<u64>,
    runs: Vec<RunResult>,
    /// Integer multiplies per token of the uniform 8-bit student, per seed.
    a8_mul: Vec<f64>,
}

impl Grid {
    fn run(&self, losses: LossSet, acts: ActSetting, seed: u64) -> &RunResult {
        self.runs
            .iter()
            .find(|r| r.losses == losses && r.acts == acts && r.seed == seed)
            .expect("cell was trained")
    }
}

/// Trains the cells both directional criteria need: no auxiliary losses at
/// A4, both losses at A4 and both losses with half the tokens at 8 bits.
fn toy_grid() -> Result<Grid, String> {
    let base = MicroTransformerConfig::default();
    let seeds: Vec<u64> = (0..5).collect();
    let corpus = corpus_for(&base);
    let half = ActSetting::Adaptive { rho: 0.5 };
    let cells = [
        Cell {
            losses: LossSet::None,
            acts: ActSetting::A4,
        },
        Cell {
            losses: LossSet::Both,
            acts: ActSetting::A4,
        },
        Cell {
            losses: LossSet::Both,
            acts: half,
        },
    ];
    let ablation = run_ablation(&base, &cells, &seeds, &corpus).map_err(|e| e.to_string())?;
    let mut a8_mul = Vec::new();
    for &seed in &seeds {
        let cfg = Cell {
            losses: LossSet::Both,
            acts: ActSetting::A8,
        }
        .config(&base, seed);
        let mut state = TrainState::new(cfg.clone(), squant::model::Params::init(&cfg, seed));
        let batch = Batch::sample(&corpus.train, cfg.batch, cfg.seq_len, seed, "acceptance-a8", 0);
        train_step(&mut state, &batch).map_err(|e| e.to_string())?;
        let eval = perplexity_eval(&cfg, &state.student, &corpus.heldout, Some(&state.scales)).map_err(|e| e.to_string())?;
        a8_mul.push(eval.mul_per_token);
    }
    Ok(Grid {
        seeds,
        runs: ablation.runs,
        a8_mul,
    })
}

fn ac8_loss_direction(grid: &Grid) -> Verdict {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for &s in &grid.seeds {
        let none = grid.run(LossSet::None, ActSetting::A4, s).ppl;
        let both = grid.run(LossSet::Both, ActSetting::A4, s).ppl;
        wins += usize::from(both <= none);
        pairs.push(format!("{both:.3}/{none:.3}"));
    }
    ensure(
        wins >= 4,
        format!("both <= none in {wins}/5 seeds (both/none ppl: {})", pairs.join(", ")),
    )
}

fn ac9_mixed_direction(grid: &Grid) -> Verdict {
    let half = ActSetting::Adaptive { rho: 0.5 };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for (i, &s) in grid.seeds.iter().enumerate() {
        let a4 = grid.run(LossSet::Both, ActSetting::A4, s);
        let mixed = grid.run(LossSet::Both, half, s);
        let between = a4.mul_per_token < mixed.mul_per_token && mixed.mul_per_token < grid.a8_mul[i];
        if !between {
            return Err(format!(
                "seed {s}: mul/token A4 {} mixed {} A8 {} not strictly ordered",
                a4.mul_per_token, mixed.mul_per_token, grid.a8_mul[i]
            ));
        }
        wins += usize::from(mixed.ppl <= a4.ppl);
        pairs.push(format!("{:.3}/{:.3}", mixed.ppl, a4.ppl));
    }
    ensure(
        wins >= 4,
        format!(
            "mul/token A4 < mixed < A8 in 5/5; mixed <= A4 ppl in {wins}/5 (mixed/A4: {})",
            pairs.join(", ")
        ),
    )
}

fn hash_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("output directory")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("output file"))
        })
        .collect()
}

fn ac10_determinism() -> Verdict {
    let tmp = std::env::temp_dir().join(format!("squant-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).map_err(|e| e.to_string())?;
    let config = tmp.join("config.json");
    std::fs::write(
        &config,
        r#"{"model": {"d_model": 16, "vocab": 16, "seq_len": 8, "batch": 2, "corpus_chars": 3000,
            "steps": 4, "teacher_steps": 20},
            "ablation_seeds": [0], "verify_cases": 200, "bench_reps": 3}"#,
    )
    .map_err(|e| e.to_string())?;
    let commands: [&[&str]; 6] = [
        &["verify-kernels"],
        &["gemm-bench", "--no-timing"],
        &["train"],
        &["eval"],
        &["inspect"],
        &["ablate"],
    ];
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.join(run);
        for args in commands {
            let status = Command::new(env!("CARGO_BIN_EXE_squant"))
                .args(args)
                .arg("--config")
                .arg(&config)
                .arg("--seed")
                .arg("7")
                .arg("--out")
                .arg(&out)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        outputs.push(hash_dir(&out));
    }
    let _ = std::fs::remove_dir_all(&tmp);
    let (a, b) = (&outputs[0], &outputs[1]);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    ensure(
        a.len() == b.len() && differing.is_empty() && a.len() >= 20,
        format!("{} files across 6 commands; differing: {differing:?}", a.len()),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("AC{id:<2} {tag} {name}: {detail} [{secs:.1} s]");
    verdict.is_ok()
}

fn main() -> ExitCode {
    let mut all = true;
    all &= report(1, "kernel bit-exactness", ac1_bit_exact);
    all &= report(2, "cost halving", ac2_cost_halving);
    all &= report(3, "quantizer contract", ac3_quantizer_contract);
    all &= report(4, "STE gradients", ac4_ste_gradients);
    all &= report(5, "degenerate plans", ac5_degenerate_plans);
    all &= report(6, "loss closed forms", ac6_closed_forms);
    all &= report(7, "optimization direction", ac7_descent_direction);
    let start = Instant::now();
    let grid = panic::catch_unwind(toy_grid).unwrap_or_else(|_| Err("grid training panicked".into()));
    println!("     toy grid trained in {:.1} s", start.elapsed().as_secs_f64());
    match &grid {
        Ok(g) => {
            all &= report(8, "auxiliary losses at toy scale", || ac8_loss_direction(g));
            all &= report(9, "mixed precision at toy scale", || ac9_mixed_direction(g));
        }
        Err(e) => {
            all &= report(8, "auxiliary losses at toy scale", || Err(e.clone()));
            all &= report(9, "mixed precision at toy scale", || Err(e.clone()));
        }
    }
    all &= report(10, "determinism", ac10_determinism);
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
