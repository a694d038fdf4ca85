use squant::gradtape::{Tape, Tensor};
use squant::model::gradcheck::check_gradients;
use squant::model::*;
use squant::quant::{BitWidth, FakeQuantMode};

fn small() -> MicroTransformerConfig {
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

fn corpus(cfg: &MicroTransformerConfig) -> Corpus {
    Corpus::synthetic(cfg.seed, cfg.corpus_chars, cfg.vocab, cfg.seq_len).unwrap()
}

fn batch(cfg: &MicroTransformerConfig, c: &Corpus, step: u64) -> Batch {
    Batch::sample(&c.train, cfg.batch, cfg.seq_len, cfg.seed, "test", step)
}

/// Trains `cfg.steps` student steps from a briefly pretrained teacher.
fn trained(cfg: &MicroTransformerConfig) -> (TrainState, Vec<StepRecord>) {
    let c = corpus(cfg);
    let (teacher, _) = pretrain_teacher(cfg, &c).unwrap();
    let mut state = TrainState::new(cfg.clone(), teacher);
    let mut log = Vec::new();
    run_qat(&mut state, &c, |r| log.push(r.clone())).unwrap();
    (state, log)
}

fn student_logits(state: &TrainState, b: &Batch, precision: Precision, cfg: &MicroTransformerConfig) -> Tensor {
    let mut tape = Tape::new();
    let vars = state.student.bind(&mut tape, false);
    let quant = StudentQuant {
        weight_bits: cfg.weight_bits,
        plan: cfg.plan_mode(),
        precision,
        scales: ScaleSource::Frozen(&state.scales),
    };
    let pass = forward(&mut tape, cfg, &vars, b, Some(quant)).unwrap();
    tape.value(pass.logits).clone()
}

#[test]
fn teacher_shapes_and_causal_base_case() {
    let cfg = small();
    let p = Params::init(&cfg, 0);
    let one = Batch {
        inputs: vec![BOS],
        targets: vec![3],
        seqs: 1,
        len: 1,
    };
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let pass = forward(&mut tape, &cfg, &vars, &one, None).unwrap();
    assert_eq!(tape.value(pass.attn[0][0]).data(), &[1.0]);
    let b = batch(&cfg, &corpus(&cfg), 0);
    let t1 = teacher_outputs(&cfg, &p, &b).unwrap();
    assert_eq!(t1.logits.shape(), &[16, 16]);
    assert_eq!(t1, teacher_outputs(&cfg, &p, &b).unwrap());
}

#[test]
fn rejects_bad_tokens_and_lengths() {
    let cfg = small();
    let p = Params::init(&cfg, 0);
    let bad = Batch {
        inputs: vec![BOS, 99],
        targets: vec![1, 2],
        seqs: 1,
        len: 2,
    };
    assert!(matches!(teacher_outputs(&cfg, &p, &bad), Err(ModelError::Token { id: 99, .. })));
    let long = Batch {
        inputs: vec![1; 9],
        targets: vec![1; 9],
        seqs: 1,
        len: 9,
    };
    assert!(matches!(teacher_outputs(&cfg, &p, &long), Err(ModelError::Length { .. })));
}

#[test]
fn degenerate_plans_match_uniform_paths() {
    let base = small();
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
        let (a, la) = trained(&adaptive);
        let (u, lu) = trained(&uniform);
        assert_eq!(la, lu);
        assert_eq!(a.student, u.student);
        let b = batch(&base, &corpus(&base), 99);
        for precision in [Precision::Fake(FakeQuantMode::Round), Precision::Integer] {
            let x = student_logits(&a, &b, precision, &adaptive);
            let y = student_logits(&u, &b, precision, &uniform);
            assert_eq!(x, y);
        }
    }
}

#[test]
fn training_and_integer_paths_agree() {
    let cfg = small();
    let (state, _) = trained(&cfg);
    let b = batch(&cfg, &corpus(&cfg), 7);
    let fake = student_logits(&state, &b, Precision::Fake(FakeQuantMode::Round), &cfg);
    let int = student_logits(&state, &b, Precision::Integer, &cfg);
    let worst = fake.data().iter().zip(int.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-4, "max deviation {worst}");
}

#[test]
fn eight_bit_student_tracks_teacher() {
    let cfg = MicroTransformerConfig {
        weight_bits: BitWidth::Eight,
        act_bits: ActBits::Uniform(BitWidth::Eight),
        ..small()
    };
    let c = corpus(&cfg);
    let p = Params::init(&cfg, 1);
    let state = TrainState::new(cfg.clone(), p.clone());
    let b = batch(&cfg, &c, 0);
    let teacher = teacher_outputs(&cfg, &p, &b).unwrap().logits;
    let student = student_logits(&state, &b, Precision::Integer, &cfg);
    let scale = teacher.max_abs();
    let worst = teacher.data().iter().zip(student.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05 * scale, "deviation {worst} vs logit scale {scale}");
}

#[test]
fn zero_head_gives_vocab_perplexity() {
    let cfg = small();
    let p = Params::init(&cfg, 0);
    let lay = Layout::new(cfg.layers);
    let names = p.names().to_vec();
    let mut tensors = p.tensors().to_vec();
    tensors[lay.lm_head()] = Tensor::zeros(&[cfg.d_model, cfg.vocab]);
    let p = Params::from_parts(names, tensors);
    let e = perplexity_eval(&cfg, &p, &corpus(&cfg).heldout, None).unwrap();
    assert!((e.ppl - cfg.vocab as f64).abs() < 1e-9);
    assert!(perplexity_eval(&cfg, &p, &[1, 2], None).is_err());
}

#[test]
fn plain_ce_when_auxiliaries_are_off() {
    let cfg = MicroTransformerConfig {
        r_e: 0.0,
        r_d: 0.0,
        gamma: 0.0,
        ..small()
    };
    let (_, log) = trained(&cfg);
    for r in &log {
        assert_eq!(r.report.total, r.report.ce);
    }
}

#[test]
fn runs_are_reproducible_and_checkpoints_round_trip() {
    let cfg = small();
    let (a, la) = trained(&cfg);
    let (b, lb) = trained(&cfg);
    assert_eq!(la, lb);
    assert_eq!(a, b);
    let bytes = checkpoint::encode(&a).unwrap();
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, a);
    let x = batch(&cfg, &corpus(&cfg), 3);
    assert_eq!(
        student_logits(&a, &x, Precision::Integer, &cfg),
        student_logits(&back, &x, Precision::Integer, &cfg)
    );
    assert!(checkpoint::decode(&bytes[..20]).is_err());
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(checkpoint::decode(&wrong).is_err());
}

#[test]
fn surrogate_gradients_match_finite_differences() {
    let cfg = small();
    let (state, _) = trained(&cfg);
    let b = batch(&cfg, &corpus(&cfg), 11);
    let check = check_gradients(&cfg, &state.teacher, &state.student, &state.scales, &b, 20, 5).unwrap();
    assert_eq!(check.samples.len(), 20);
    assert!(check.max_rel_err() <= 2e-2, "{:#?}", check.samples);
}

#[test]
fn teacher_loss_falls_for_most_seeds() {
    let falling = (0..5)
        .filter(|&seed| {
            let cfg = MicroTransformerConfig {
                seed,
                teacher_steps: 200,
                ..small()
            };
            let (_, losses) = pretrain_teacher(&cfg, &corpus(&cfg)).unwrap();
            let head: f64 = losses[..20].iter().sum();
            let tail: f64 = losses[180..].iter().sum();
            tail < head
        })
        .count();
    assert!(falling >= 4);
}
