//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wavekit::config::{LoraConfig, ModelConfig, ObjectiveConfig};
use wavekit::data::vocab;
use wavekit::model::{MultimodalSample, WaveModel};
use wavekit::objectives::{qa_loss, retrieval_loss, EmbeddingBatch};
use wavekit::tensor::{grad_check, grad_check_coords, GradCheckReport, Tape, Tensor, Var};
use wavekit::Result;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in [-2, 2].
pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, rng)
}

/// Contracts an op output with a fixed random weight so every output
/// coordinate feeds the scalar under test.
fn weighted<'t>(t: &'t Tape, y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(t.constant(w.clone()))?.sum())
}

/// One differentiable op with respect to one of its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> Result<GradCheckReport>,
}

macro_rules! case {
    ($name:expr, |$r:ident| $body:block) => {
        OpCase {
            name: $name,
            run: |$r: &mut ChaCha8Rng| -> Result<GradCheckReport> { $body },
        }
    };
}

/// Every differentiable tape op, each input position checked separately.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("matmul/lhs", |r| {
            let (x, b, w) = (rand_t(&[3, 4], r), rand_t(&[4, 2], r), rand_t(&[3, 2], r));
            grad_check(move |t, x| weighted(t, x.matmul(t.constant(b.clone()))?, &w), &x, EPS, TOL)
        }),
        case!("matmul/rhs", |r| {
            let (a, x, w) = (rand_t(&[3, 4], r), rand_t(&[4, 2], r), rand_t(&[3, 2], r));
            grad_check(move |t, x| weighted(t, t.constant(a.clone()).matmul(x)?, &w), &x, EPS, TOL)
        }),
        case!("add", |r| {
            let (x, b, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.add(t.constant(b.clone()))?, &w), &x, EPS, TOL)
        }),
        case!("sub/lhs", |r| {
            let (x, b, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.sub(t.constant(b.clone()))?, &w), &x, EPS, TOL)
        }),
        case!("sub/rhs", |r| {
            let (a, x, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, t.constant(a.clone()).sub(x)?, &w), &x, EPS, TOL)
        }),
        case!("mul", |r| {
            let (x, b, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.mul(t.constant(b.clone()))?, &w), &x, EPS, TOL)
        }),
        case!("mul/self", |r| {
            let (x, w) = (rand_t(&[2, 5], r), rand_t(&[2, 5], r));
            grad_check(move |t, x| weighted(t, x.mul(x)?, &w), &x, EPS, TOL)
        }),
        case!("add_row/matrix", |r| {
            let (x, b, w) = (rand_t(&[3, 4], r), rand_t(&[4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.add_row(t.constant(b.clone()))?, &w), &x, EPS, TOL)
        }),
        case!("add_row/bias", |r| {
            let (a, x, w) = (rand_t(&[3, 4], r), rand_t(&[4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, t.constant(a.clone()).add_row(x)?, &w), &x, EPS, TOL)
        }),
        case!("scale", |r| {
            let (x, w) = (rand_t(&[3, 3], r), rand_t(&[3, 3], r));
            let f = r.gen_range(-2.0..2.0);
            grad_check(move |t, x| weighted(t, x.scale(f), &w), &x, EPS, TOL)
        }),
        case!("scale_by/tensor", |r| {
            let (x, s, w) = (rand_t(&[2, 3], r), rand_t(&[4], r), rand_t(&[2, 3], r));
            let i = r.gen_range(0..4);
            grad_check(move |t, x| weighted(t, x.scale_by(t.constant(s.clone()), i)?, &w), &x, EPS, TOL)
        }),
        case!("scale_by/scalars", |r| {
            let (a, x, w) = (rand_t(&[2, 3], r), rand_t(&[4], r), rand_t(&[2, 3], r));
            let i = r.gen_range(0..4);
            grad_check(move |t, x| weighted(t, t.constant(a.clone()).scale_by(x, i)?, &w), &x, EPS, TOL)
        }),
        case!("gelu", |r| {
            let (x, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.gelu(), &w), &x, EPS, TOL)
        }),
        case!("layer_norm/x", |r| {
            let (x, g, b, w) = (rand_t(&[3, 5], r), rand_t(&[5], r), rand_t(&[5], r), rand_t(&[3, 5], r));
            grad_check(
                move |t, x| weighted(t, x.layer_norm(t.constant(g.clone()), t.constant(b.clone()))?, &w),
                &x,
                EPS,
                TOL,
            )
        }),
        case!("layer_norm/gamma", |r| {
            let (a, x, b, w) = (rand_t(&[3, 5], r), rand_t(&[5], r), rand_t(&[5], r), rand_t(&[3, 5], r));
            grad_check(
                move |t, x| weighted(t, t.constant(a.clone()).layer_norm(x, t.constant(b.clone()))?, &w),
                &x,
                EPS,
                TOL,
            )
        }),
        case!("layer_norm/beta", |r| {
            let (a, g, x, w) = (rand_t(&[3, 5], r), rand_t(&[5], r), rand_t(&[5], r), rand_t(&[3, 5], r));
            grad_check(
                move |t, x| weighted(t, t.constant(a.clone()).layer_norm(t.constant(g.clone()), x)?, &w),
                &x,
                EPS,
                TOL,
            )
        }),
        case!("softmax", |r| {
            let (x, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.softmax(), &w), &x, EPS, TOL)
        }),
        case!("softmax_cross_entropy", |r| {
            let x = rand_t(&[4, 5], r);
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            grad_check(move |_, x| x.softmax_cross_entropy(&targets), &x, EPS, TOL)
        }),
        case!("sum", |r| {
            let x = rand_t(&[3, 4], r);
            grad_check(|_, x| Ok(x.sum()), &x, EPS, TOL)
        }),
        case!("mean", |r| {
            let x = rand_t(&[3, 4], r);
            grad_check(|t, x| Ok(x.mul(t.constant(Tensor::full(&[3, 4], 1.5)))?.mean()), &x, EPS, TOL)
        }),
        case!("row_sums", |r| {
            let (x, w) = (rand_t(&[3, 4], r), rand_t(&[3], r));
            grad_check(move |t, x| weighted(t, x.row_sums()?, &w), &x, EPS, TOL)
        }),
        case!("normalize_rows", |r| {
            let (x, w) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(move |t, x| weighted(t, x.normalize_rows()?, &w), &x, EPS, TOL)
        }),
        case!("concat/axis0", |r| {
            let (x, b, w) = (rand_t(&[2, 3], r), rand_t(&[3, 3], r), rand_t(&[5, 3], r));
            grad_check(move |t, x| weighted(t, t.concat(&[t.constant(b.clone()), x], 0)?, &w), &x, EPS, TOL)
        }),
        case!("concat/axis1", |r| {
            let (x, b, w) = (rand_t(&[3, 2], r), rand_t(&[3, 4], r), rand_t(&[3, 6], r));
            grad_check(move |t, x| weighted(t, t.concat(&[x, t.constant(b.clone())], 1)?, &w), &x, EPS, TOL)
        }),
        case!("concat/vector", |r| {
            let (x, b, w) = (rand_t(&[3], r), rand_t(&[2], r), rand_t(&[5], r));
            grad_check(move |t, x| weighted(t, t.concat(&[x, t.constant(b.clone())], 0)?, &w), &x, EPS, TOL)
        }),
        case!("slice/rows", |r| {
            let (x, w) = (rand_t(&[5, 3], r), rand_t(&[2, 3], r));
            let s = r.gen_range(0..4);
            grad_check(move |t, x| weighted(t, x.slice(0, s, 2)?, &w), &x, EPS, TOL)
        }),
        case!("slice/cols", |r| {
            let (x, w) = (rand_t(&[3, 5], r), rand_t(&[3, 2], r));
            let s = r.gen_range(0..4);
            grad_check(move |t, x| weighted(t, x.slice(1, s, 2)?, &w), &x, EPS, TOL)
        }),
        case!("gather_rows", |r| {
            let (x, w) = (rand_t(&[4, 3], r), rand_t(&[6, 3], r));
            let idx: Vec<usize> = (0..6).map(|_| r.gen_range(0..4)).collect();
            grad_check(move |t, x| weighted(t, x.gather_rows(&idx)?, &w), &x, EPS, TOL)
        }),
        case!("transpose", |r| {
            let (x, w) = (rand_t(&[3, 4], r), rand_t(&[4, 3], r));
            grad_check(move |t, x| weighted(t, x.transpose()?, &w), &x, EPS, TOL)
        }),
        case!("reshape", |r| {
            let (x, w) = (rand_t(&[3, 4], r), rand_t(&[2, 6], r));
            grad_check(move |t, x| weighted(t, x.reshape(&[2, 6])?, &w), &x, EPS, TOL)
        }),
        case!("rotary", |r| {
            let (x, w) = (rand_t(&[4, 16], r), rand_t(&[4, 16], r));
            let angles: Vec<f64> = (0..4 * 3).map(|_| r.gen_range(-6.0..6.0)).collect();
            let (cos, sin): (Vec<f64>, Vec<f64>) = angles.iter().map(|a| (a.cos(), a.sin())).unzip();
            grad_check(
                move |t, x| weighted(t, t.rotary(x, cos.clone(), sin.clone(), 2, 6)?, &w),
                &x,
                EPS,
                TOL,
            )
        }),
        case!("attention/q", |r| { attention_case(r, 0) }),
        case!("attention/k", |r| { attention_case(r, 1) }),
        case!("attention/v", |r| { attention_case(r, 2) }),
    ]
}

fn attention_case(r: &mut ChaCha8Rng, which: usize) -> Result<GradCheckReport> {
    let ins: Vec<Tensor> = (0..3).map(|_| rand_t(&[5, 4], r)).collect();
    let w = rand_t(&[5, 4], r);
    let x = ins[which].clone();
    grad_check(
        move |t, x| {
            let mut v: Vec<Var> = ins.iter().map(|i| t.constant(i.clone())).collect();
            v[which] = x;
            weighted(t, t.attention(v[0], v[1], v[2], vec![0..3, 3..5], 2)?, &w)
        },
        &x,
        EPS,
        TOL,
    )
}

/// Small model for end-to-end gradient checks: 2 layers, width 24, 2 heads.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 24,
        n_layers: 2,
        n_heads: 2,
        d_embed: 8,
        d_ff: 32,
        rotary_dim: 6,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

/// Tiny model with LoRA B matrices randomized, so adapter gradients are
/// not trivially zero.
pub fn tiny_model(seed: u64) -> WaveModel {
    let mut m = WaveModel::new(tiny_model_config(), LoraConfig::default(), seed).unwrap();
    let mut r = rng(seed ^ 0xB);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        if m.params().name(id).ends_with("lora_b") {
            let shape = m.params().get(id).shape().to_vec();
            *m.params_mut().get_mut(id) = Tensor::randn(&shape, 0.1, &mut r);
        }
    }
    m
}

/// Random short clip of the given kind for a model config.
pub fn random_clip(cfg: &ModelConfig, kind: wavekit::model::ModalityKind, r: &mut ChaCha8Rng) -> MultimodalSample {
    use wavekit::model::ModalityKind::*;
    let frames = r.gen_range(1..=3);
    let mut mat = |w: usize| Tensor::uniform(&[frames, w], -1.0, 1.0, r);
    let instr = vocab::describe(vocab::Media::AudioVisual);
    match kind {
        TextOnly => {
            let len = r.gen_range(2..=4);
            MultimodalSample::text((0..len).map(|_| r.gen_range(0..cfg.vocab_size as u32)).collect())
        }
        VisualOnly => MultimodalSample::visual(instr, mat(cfg.visual_dim)),
        AudioOnly => {
            let s = mat(cfg.speech_dim);
            MultimodalSample::audio(instr, Some(s), Some(mat(cfg.audio_dim)))
        }
        AudioVisual => {
            let f = mat(cfg.visual_dim);
            let s = mat(cfg.speech_dim);
            MultimodalSample::audio_visual(instr, f, Some(s), Some(mat(cfg.audio_dim)))
        }
    }
}

/// Which end-to-end loss to check.
#[derive(Clone, Copy, Debug)]
pub enum Pipeline {
    Retrieval,
    Qa,
}

/// Checks the gradient of a full model loss with respect to one randomly
/// chosen trainable parameter tensor, on a few random coordinates of it.
pub fn pipeline_trial(model: &WaveModel, pipeline: Pipeline, r: &mut ChaCha8Rng, coords: usize) -> Result<(String, GradCheckReport)> {
    use wavekit::model::ModalityKind::*;
    let cfg = model.config().clone();
    let objective = ObjectiveConfig::default();
    let n = 4;
    let (sources, targets, distractors, k) = match pipeline {
        Pipeline::Retrieval => {
            let kinds = [(VisualOnly, TextOnly), (AudioVisual, TextOnly), (AudioOnly, VisualOnly)];
            let (sk, tk) = kinds[r.gen_range(0..kinds.len())];
            let s: Vec<_> = (0..n).map(|_| random_clip(&cfg, sk, r)).collect();
            let t: Vec<_> = (0..n).map(|_| random_clip(&cfg, tk, r)).collect();
            (s, t, Vec::new(), 0)
        }
        Pipeline::Qa => {
            let k = 3;
            let s: Vec<_> = (0..n).map(|_| random_clip(&cfg, AudioVisual, r)).collect();
            let t: Vec<_> = (0..n).map(|_| random_clip(&cfg, TextOnly, r)).collect();
            let d: Vec<_> = (0..n * k).map(|_| random_clip(&cfg, TextOnly, r)).collect();
            (s, t, d, k)
        }
    };
    let trainable: Vec<_> = model.params().ids().filter(|&id| model.params().is_trainable(id)).collect();
    let id = trainable[r.gen_range(0..trainable.len())];
    let x = model.params().get(id).clone();
    let picks: Vec<usize> = (0..coords.min(x.numel())).map(|_| r.gen_range(0..x.numel())).collect();
    let report = grad_check_coords(
        |t, x| {
            let mut p = model.params().bind(t, false);
            p[id.index()] = x;
            let mut all: Vec<&MultimodalSample> = sources.iter().collect();
            all.extend(targets.iter());
            all.extend(distractors.iter());
            let e = model.embed_on_tape(t, &p, &all, None)?;
            let s = e.slice(0, 0, n)?;
            let tg = e.slice(0, n, n)?;
            match pipeline {
                Pipeline::Retrieval => retrieval_loss(&EmbeddingBatch::retrieval(s, tg)?, &objective),
                Pipeline::Qa => {
                    let d = e.slice(0, 2 * n, n * k)?;
                    qa_loss(&EmbeddingBatch::qa(s, tg, d, k)?, &objective)
                }
            }
        },
        &x,
        &picks,
        EPS,
        TOL,
    )?;
    Ok((model.params().name(id).to_string(), report))
}
