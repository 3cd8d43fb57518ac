mod common;

use proptest::prelude::*;
use rand::Rng;
use wavekit::config::ObjectiveConfig;
use wavekit::objectives::{cosine_sim, qa_loss, retrieval_loss, EmbeddingBatch, Role};
use wavekit::tensor::{grad_check, Tape, Tensor};
use wavekit::WaveError;

fn obj(temperature: f64) -> ObjectiveConfig {
    ObjectiveConfig { temperature, ..ObjectiveConfig::default() }
}

fn rows(v: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(v).unwrap()
}

fn retrieval(s: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let tape = Tape::new();
    let b = EmbeddingBatch::retrieval(tape.constant(s.clone()), tape.constant(t.clone())).unwrap();
    retrieval_loss(&b, &obj(tau)).unwrap().item()
}

fn qa(s: &Tensor, a: &Tensor, d: &Tensor, n: usize, tau: f64) -> f64 {
    let tape = Tape::new();
    let b = EmbeddingBatch::qa(tape.constant(s.clone()), tape.constant(a.clone()), tape.constant(d.clone()), n).unwrap();
    qa_loss(&b, &obj(tau)).unwrap().item()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// -log softmax(logits)[target], evaluated directly.
fn nll(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn retrieval_oracle(s: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let n = s.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let fwd: Vec<f64> = (0..n).map(|j| cos(s.row(i), t.row(j)) / tau).collect();
        let bwd: Vec<f64> = (0..n).map(|j| cos(t.row(i), s.row(j)) / tau).collect();
        total += 0.5 * (nll(&fwd, i) + nll(&bwd, i));
    }
    total / n as f64
}

fn qa_oracle(s: &Tensor, a: &Tensor, d: &Tensor, n: usize, tau: f64) -> f64 {
    let rows = s.shape()[0];
    let mut total = 0.0;
    for i in 0..rows {
        let mut logits = vec![cos(s.row(i), a.row(i)) / tau];
        logits.extend((0..n).map(|k| cos(s.row(i), d.row(i * n + k)) / tau));
        total += nll(&logits, 0);
    }
    total / rows as f64
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(WaveError::Degenerate(_))));
}

#[test]
fn retrieval_examples() {
    let one = rows(&[vec![0.3, -1.0, 2.0]]);
    let other = rows(&[vec![-5.0, 1.0, 0.1]]);
    assert_eq!(retrieval(&one, &other, 0.01), 0.0);

    let same = rows(&vec![vec![1.0, 2.0, 3.0]; 4]);
    assert!((retrieval(&same, &same, 0.01) - 4f64.ln()).abs() < 1e-12);

    let eye = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let want = (1.0 + (-1f64).exp()).ln();
    assert!((retrieval(&eye, &eye, 1.0) - want).abs() < 1e-12);
    assert!((want - 0.31326).abs() < 1e-5);
}

#[test]
fn qa_examples() {
    let s = rows(&vec![vec![1.0, 0.0]; 2]);
    let uniform = qa(&s, &s, &rows(&vec![vec![1.0, 0.0]; 6]), 3, 0.01);
    assert!((uniform - 4f64.ln()).abs() < 1e-12);

    let s1 = rows(&[vec![1.0, 0.0]]);
    let pos = rows(&[vec![1.0, 0.0]]);
    let neg = rows(&vec![vec![-1.0, 0.0]; 3]);
    assert!(qa(&s1, &pos, &neg, 3, 0.01) < 1e-12);

    let half = rows(&[vec![0.5, 0.75f64.sqrt()]]);
    let orth = rows(&[vec![0.0, 1.0]]);
    let want = (1.0 + (-0.5f64).exp()).ln();
    assert!((qa(&s1, &half, &orth, 1, 1.0) - want).abs() < 1e-12);
    assert!((want - 0.47408).abs() < 1e-5);
}

#[test]
fn batch_shape_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[0, 4]));
    let b = EmbeddingBatch::retrieval(a, a).unwrap();
    assert!(matches!(retrieval_loss(&b, &obj(0.01)), Err(WaveError::EmptyBatch)));

    let s = tape.constant(Tensor::full(&[2, 4], 1.0));
    let t3 = tape.constant(Tensor::full(&[3, 4], 1.0));
    assert!(EmbeddingBatch::retrieval(s, t3).is_err());
    assert!(EmbeddingBatch::qa(s, s, t3, 2).is_err());

    let d = tape.constant(Tensor::full(&[4, 4], 1.0));
    let q = EmbeddingBatch::qa(s, s, d, 2).unwrap();
    assert!(matches!(retrieval_loss(&q, &obj(0.01)), Err(WaveError::Argument(_))));
    assert_eq!(q.roles().iter().filter(|&&r| r == Role::Distractor).count(), 4);
    let plain = EmbeddingBatch::retrieval(s, s).unwrap();
    assert!(qa_loss(&plain, &obj(0.01)).is_err());
}

#[test]
fn losses_match_direct_evaluation() {
    let mut r = common::rng(21);
    for tau in [1.0, 0.07, 0.01] {
        for n in [1, 2, 5] {
            let s = common::rand_t(&[n, 6], &mut r);
            let t = common::rand_t(&[n, 6], &mut r);
            let d = common::rand_t(&[n * 3, 6], &mut r);
            let got = retrieval(&s, &t, tau);
            let want = retrieval_oracle(&s, &t, tau);
            assert!((got - want).abs() <= 1e-10 * (1.0 + want), "retrieval τ={tau} n={n}: {got} vs {want}");
            let got = qa(&s, &t, &d, 3, tau);
            let want = qa_oracle(&s, &t, &d, 3, tau);
            assert!((got - want).abs() <= 1e-10 * (1.0 + want), "qa τ={tau} n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn loss_gradients_match_central_differences() {
    let mut r = common::rng(22);
    for tau in [1.0, 0.07, 0.01] {
        for _ in 0..10 {
            let t = common::rand_t(&[4, 5], &mut r);
            let s = common::rand_t(&[4, 5], &mut r);
            let d = common::rand_t(&[12, 5], &mut r);
            let cfg = obj(tau);
            let tt = t.clone();
            let rep = grad_check(
                move |tape, x| retrieval_loss(&EmbeddingBatch::retrieval(x, tape.constant(tt.clone()))?, &cfg),
                &s,
                common::EPS,
                common::TOL,
            )
            .unwrap();
            assert!(rep.passed, "retrieval τ={tau}: {rep:?}");
            let (ss, tt) = (s.clone(), t.clone());
            let cfg = obj(tau);
            let rep = grad_check(
                move |tape, x| {
                    let b = EmbeddingBatch::qa(tape.constant(ss.clone()), tape.constant(tt.clone()), x, 3)?;
                    qa_loss(&b, &cfg)
                },
                &d,
                common::EPS,
                common::TOL,
            )
            .unwrap();
            assert!(rep.passed, "qa τ={tau}: {rep:?}");
        }
    }
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(
        prop::collection::vec(-2.0f64..2.0, d).prop_filter("nonzero row", |r| r.iter().any(|x| x.abs() > 1e-2)),
        n,
    )
    .prop_map(|r| Tensor::from_rows(&r).unwrap())
}

proptest! {
    #[test]
    fn retrieval_is_symmetric_in_sides(s in matrix(4, 5), t in matrix(4, 5)) {
        prop_assert_eq!(retrieval(&s, &t, 0.01).to_bits(), retrieval(&t, &s, 0.01).to_bits());
    }

    #[test]
    fn losses_ignore_positive_row_scaling(
        s in matrix(4, 5),
        t in matrix(4, 5),
        d in matrix(8, 5),
        row in 0usize..4,
        factor in 1e-3f64..1e3,
    ) {
        let scaled = |m: &Tensor, i: usize| {
            let mut m = m.clone();
            let w = m.shape()[1];
            m.data_mut()[i * w..(i + 1) * w].iter_mut().for_each(|x| *x *= factor);
            m
        };
        let base = retrieval(&s, &t, 0.07);
        prop_assert!((base - retrieval(&scaled(&s, row), &t, 0.07)).abs() <= 1e-12);
        prop_assert!((base - retrieval(&s, &scaled(&t, row), 0.07)).abs() <= 1e-12);
        let base = qa(&s, &t, &d, 2, 0.07);
        prop_assert!((base - qa(&scaled(&s, row), &t, &d, 2, 0.07)).abs() <= 1e-12);
        prop_assert!((base - qa(&s, &t, &scaled(&d, 2 * row + 1), 2, 0.07)).abs() <= 1e-12);
    }

    #[test]
    fn retrieval_ignores_joint_row_order(s in matrix(5, 4), t in matrix(5, 4), seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let mut perm: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let permute = |m: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let a = retrieval(&s, &t, 0.05);
        let b = retrieval(&permute(&s), &permute(&t), 0.05);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
    }
}
