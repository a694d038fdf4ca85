use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use squant::gradtape::{Tape, Tensor};
use squant::losses::*;

fn randn(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(r)).collect()).unwrap()
}

fn entropy_sum(q: &Tensor, k: &Tensor, heads: usize) -> f64 {
    let s = qk_stats(
        &q.reshape(vec![1, heads, q.rows() / heads, q.cols()]).unwrap(),
        &k.reshape(vec![1, heads, k.rows() / heads, k.cols()]).unwrap(),
    )
    .unwrap();
    s.q_var.iter().zip(&s.k_var).map(|(a, b)| (1.0 + a * b).ln()).sum()
}

fn sgd(t: &Tensor, g: &Tensor, lr: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect()).unwrap()
}

#[test]
fn entropy_descent_raises_the_variance_sum() {
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let heads = 2;
        let (mut q, mut k) = (randn(&mut r, &[heads * 8, 4], 0.5), randn(&mut r, &[heads * 8, 4], 0.5));
        let mut prev = entropy_sum(&q, &k, heads);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let (qv, kv) = (tape.param(q.clone()), tape.param(k.clone()));
            let mut pairs = Vec::new();
            for h in 0..heads {
                let qh = tape.slice(qv, h * 8..(h + 1) * 8, 0..4).unwrap();
                let kh = tape.slice(kv, h * 8..(h + 1) * 8, 0..4).unwrap();
                pairs.push((qh, kh));
            }
            let loss = entropy_loss_tape(&mut tape, &pairs, DEFAULT_EPS).unwrap();
            let g = tape.backward(loss).unwrap();
            q = sgd(&q, g.get(qv).unwrap(), 1e-2);
            k = sgd(&k, g.get(kv).unwrap(), 1e-2);
            let now = entropy_sum(&q, &k, heads);
            assert!(now > prev, "seed {seed}: {now} <= {prev}");
            prev = now;
        }
    }
}

#[test]
fn alignment_descent_raises_similarity() {
    for seed in 0..5 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = 6;
        let mut tape = Tape::new();
        let t_logits = tape.constant(randn(&mut r, &[n, n], 2.0));
        let teacher = tape.softmax_rows(t_logits, true).unwrap();
        let target = tape.value(teacher).clone();
        let mut logits = randn(&mut r, &[n, n], 2.0);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let lv = tape.param(logits.clone());
            let s = tape.softmax_rows(lv, true).unwrap();
            let t = tape.constant(target.clone());
            let (sim, loss) = distribution_loss_tape(&mut tape, &[(s, t)], DEFAULT_EPS, AlignmentSign::Negated).unwrap();
            let now = tape.value(sim).item().unwrap();
            assert!(now > prev, "seed {seed}: {now} <= {prev}");
            prev = now;
            let g = tape.backward(loss).unwrap();
            logits = sgd(&logits, g.get(lv).unwrap(), 0.5);
        }
    }
}

#[test]
fn entropy_gradient_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let q = randn(&mut r, &[6, 3], 1.0);
    let k = randn(&mut r, &[6, 3], 1.0);
    let value = |q: &Tensor| {
        let mut tape = Tape::new();
        let (qv, kv) = (tape.param(q.clone()), tape.param(k.clone()));
        let l = entropy_loss_tape(&mut tape, &[(qv, kv)], DEFAULT_EPS).unwrap();
        (tape.value(l).item().unwrap(), tape.backward(l).unwrap().get(qv).unwrap().clone())
    };
    let (_, g) = value(&q);
    let h = 1e-6;
    for i in 0..q.len() {
        let mut plus = q.data().to_vec();
        plus[i] += h;
        let mut minus = q.data().to_vec();
        minus[i] -= h;
        let fd = (value(&Tensor::new(vec![6, 3], plus).unwrap()).0 - value(&Tensor::new(vec![6, 3], minus).unwrap()).0)
            / (2.0 * h);
        assert!((fd - g.data()[i]).abs() <= 2e-2 * fd.abs().max(1e-6));
    }
}
