mod common;

use rand::Rng;
use wavekit::config::{DataConfig, FusionStrategy, LoraConfig, RunConfig, TaskCounts, TrainConfig};
use wavekit::data::vocab::{self, Slot};
use wavekit::data::{generate_dataset, generate_eval_split, Dataset, EvalSplit, LatentSpec, QaRecord, Record, SourceTag};
use wavekit::eval::{
    ablation_rows, argmax, binomial_upper_tail, cosine_matrix, demo_argmax_hits, demo_inputs, evaluate_all,
    evaluate_retrieval, predict_from_embeddings, prompt_aware_demo, rank_of, recall_at_k, run_fusion_ablation,
    write_demo_csv, Direction, InputSetting, DEMO_PROMPTS, DEMO_TEXTS,
};
use wavekit::model::WaveModel;
use wavekit::tensor::Tensor;
use wavekit::train::{clip_global_norm, learning_rate_at, train, write_loss_trace, AdamW, Trainer};
use wavekit::WaveError;

fn tiny_run(steps: usize, each: usize) -> RunConfig {
    let mut run = RunConfig::default();
    run.model = common::tiny_model_config();
    run.train.steps = steps;
    run.train.batch_size = 4;
    run.data.counts = TaskCounts {
        video_text: each,
        av_text: each,
        video_audio: each,
        audio_text: each,
        qa: each,
    };
    run.data.eval_pool = 16;
    run
}

fn data_for(run: &RunConfig) -> (Dataset, EvalSplit) {
    let spec = LatentSpec::new(&run.data, run.seed).unwrap();
    let d = generate_dataset(&spec, &run.data, run.objective.distractors, run.seed).unwrap();
    let s = generate_eval_split(&spec, &run.data, run.objective.distractors, run.seed).unwrap();
    (d, s)
}

/// Rank by a full stable sort on (score desc, index asc).
fn oracle_rank(scores: &[f64], gold: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&i| i == gold).unwrap()
}

#[test]
fn zero_steps_return_the_initialization() {
    let run = tiny_run(0, 8);
    let (d, _) = data_for(&run);
    let out = train(&run, &d, None).unwrap();
    let init = WaveModel::new(run.model.clone(), run.lora.clone(), run.seed).unwrap();
    assert_eq!(out.model.params().to_bytes(), init.params().to_bytes());
    assert!(out.trace.is_empty());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut run = tiny_run(1, 8);
    run.train.learning_rate = 0.0;
    let (d, _) = data_for(&run);
    let out = train(&run, &d, None).unwrap();
    let init = WaveModel::new(run.model.clone(), run.lora.clone(), run.seed).unwrap();
    assert_eq!(out.model.params().to_bytes(), init.params().to_bytes());
    assert_eq!(out.trace.len(), 1);
}

#[test]
fn training_moves_only_trainable_parameters() {
    let run = tiny_run(6, 8);
    let (d, _) = data_for(&run);
    let init = WaveModel::new(run.model.clone(), run.lora.clone(), run.seed).unwrap();
    let out = train(&run, &d, None).unwrap();
    let (a, b) = (init.params(), out.model.params());
    for id in a.ids() {
        let same = a.get(id) == b.get(id);
        if !a.is_trainable(id) {
            assert!(same, "frozen {} moved", a.name(id));
        }
    }
    for name in init.base_parameter_names() {
        assert_eq!(a.by_name(&name), b.by_name(&name), "{name}");
    }
    assert!(a.ids().any(|id| a.is_trainable(id) && a.get(id) != b.get(id)));
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let model = common::tiny_model(1);
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&model, &cfg);
    let grads: Vec<Tensor> = opt
        .params()
        .iter()
        .map(|&id| Tensor::full(model.params().get(id).shape(), 0.5))
        .collect();
    let mut after = model.clone();
    let lr = 1e-3;
    opt.step(&mut after, &grads, lr);
    for &id in opt.params() {
        for (p0, p1) in model.params().get(id).data().iter().zip(after.params().get(id).data()) {
            let want = p0 - lr * (0.5 / (0.5 + cfg.adam_eps) + cfg.weight_decay * p0);
            assert!((p1 - want).abs() < 1e-15);
        }
    }
}

#[test]
fn warmup_then_constant_schedule() {
    let cfg = TrainConfig { steps: 100, learning_rate: 1.0, ..TrainConfig::default() };
    let lrs: Vec<f64> = (0..8).map(|s| learning_rate_at(&cfg, s)).collect();
    assert_eq!(lrs, vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0]);
    assert_eq!(learning_rate_at(&cfg, 99), 1.0);
}

#[test]
fn clipping_rescales_to_the_limit() {
    let mut g = vec![Tensor::from_vec(vec![3.0, 0.0]), Tensor::from_vec(vec![4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
    let mut small = vec![Tensor::from_vec(vec![0.1])];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.1]);
}

#[test]
fn retrieval_loss_falls_on_a_tiny_model() {
    let mut run = tiny_run(240, 64);
    run.train.learning_rate = 1e-3;
    let (d, _) = data_for(&run);
    let out = train(&run, &d, None).unwrap();
    let retrieval: Vec<f64> = out
        .trace
        .iter()
        .filter(|p| p.source != SourceTag::Qa)
        .map(|p| p.loss)
        .collect();
    let k = 40;
    let head = retrieval[..k].iter().sum::<f64>() / k as f64;
    let tail = retrieval[retrieval.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn same_seed_same_trace() {
    let run = tiny_run(5, 8);
    let (d, _) = data_for(&run);
    let a = train(&run, &d, None).unwrap();
    let b = train(&run, &d, None).unwrap();
    let (mut ta, mut tb) = (Vec::new(), Vec::new());
    write_loss_trace(&a.trace, &mut ta).unwrap();
    write_loss_trace(&b.trace, &mut tb).unwrap();
    assert_eq!(ta, tb);
    assert!(String::from_utf8(ta).unwrap().starts_with("step,task,source,loss,learning_rate,grad_norm\n"));
    assert_eq!(a.model.params().to_bytes(), b.model.params().to_bytes());
}

#[test]
fn non_finite_inputs_are_reported_as_divergence() {
    let run = tiny_run(1, 4);
    let (mut d, _) = data_for(&run);
    d.records.retain(|r| r.source_tag() == SourceTag::VisualText);
    for r in &mut d.records {
        if let Record::Pair(p) = r {
            p.source.frames.as_mut().unwrap().data_mut()[0] = f64::NAN;
        }
    }
    let model = WaveModel::new(run.model.clone(), run.lora.clone(), 1).unwrap();
    let mut t = Trainer::new(model, &d, run.objective.clone(), run.train.clone(), 1).unwrap();
    let r = t.step();
    assert!(matches!(r, Err(WaveError::Divergence { step: 0, .. })), "{r:?}");
}

#[test]
fn recall_matches_full_sort_oracle() {
    let mut r = common::rng(31);
    for trial in 0..50 {
        let q = r.gen_range(1..=60);
        let t = r.gen_range(1..=1000);
        // Coarse quantization forces plenty of ties.
        let levels = if trial % 2 == 0 { 5 } else { 1_000_000 };
        let data: Vec<f64> = (0..q * t).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let sim = Tensor::new(vec![q, t], data).unwrap();
        let gold: Vec<usize> = (0..q).map(|_| r.gen_range(0..t)).collect();
        for k in [1, 5, 10] {
            let hits = (0..q).filter(|&i| oracle_rank(sim.row(i), gold[i]) < k).count();
            assert_eq!(recall_at_k(&sim, &gold, k).unwrap(), hits as f64 / q as f64);
        }
        for i in 0..q {
            assert_eq!(rank_of(sim.row(i), gold[i]), oracle_rank(sim.row(i), gold[i]));
        }
    }
}

#[test]
fn single_target_pool_always_hits() {
    let sim = Tensor::new(vec![3, 1], vec![-1.0, 0.0, 0.5]).unwrap();
    assert_eq!(recall_at_k(&sim, &[0, 0, 0], 1).unwrap(), 1.0);
    let run = tiny_run(1, 4);
    let (_, split) = data_for(&run);
    let m = WaveModel::new(run.model.clone(), run.lora.clone(), 1).unwrap();
    let one = &split.pool(SourceTag::VisualText)[..1];
    assert_eq!(evaluate_retrieval(&m, one, Direction::TextToVisual).unwrap().r_at_1, 1.0);
}

#[test]
fn untrained_models_retrieve_at_chance() {
    let mut run = RunConfig::default();
    run.data.eval_pool = 100;
    let (_, split) = data_for(&run);
    let pool = split.pool(SourceTag::VisualText);
    let mut hits = 0usize;
    for seed in 0..10 {
        let m = WaveModel::new(run.model.clone(), run.lora.clone(), 100 + seed).unwrap();
        hits += (evaluate_retrieval(&m, pool, Direction::TextToVisual).unwrap().r_at_1 * 100.0).round() as usize;
    }
    // Two-sided 99% interval of Binomial(1000, 0.01).
    assert!(binomial_upper_tail(hits, 1000, 0.01) > 0.005, "{hits} hits: too many");
    assert!(1.0 - binomial_upper_tail(hits + 1, 1000, 0.01) > 0.005, "{hits} hits: too few");
}

#[test]
fn argmax_prefers_the_lowest_index() {
    assert_eq!(argmax(&[0.3, 0.7, 0.7, 0.1]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
}

fn qa_pool(n: usize) -> (LatentSpec, Vec<QaRecord>) {
    let cfg = DataConfig { eval_pool: n, ..DataConfig::default() };
    let spec = LatentSpec::new(&cfg, 3).unwrap();
    let split = generate_eval_split(&spec, &cfg, 3, 3).unwrap();
    (spec, split.qa)
}

#[test]
fn identical_candidates_pick_index_zero() {
    let (_, records) = qa_pool(64);
    let s = Tensor::full(&[64, 4], 1.0);
    let c = Tensor::full(&[64 * 4, 4], 1.0);
    let preds = predict_from_embeddings(&s, &c, &records).unwrap();
    assert!(preds.iter().all(|&p| p == 0));
    let at_zero = records.iter().filter(|r| r.answer_index == 0).count();
    let acc = preds.iter().zip(&records).filter(|(&p, r)| p == r.answer_index).count();
    assert_eq!(acc, at_zero);
}

#[test]
fn latent_oracle_embeddings_answer_everything() {
    let (spec, records) = qa_pool(128);
    let k = spec.latent_dim;
    let c = spec.classes;
    let embed = |slot: Slot, v: usize| {
        let mut e = vec![0.0; 3 * k];
        e[slot.index() * k..(slot.index() + 1) * k].copy_from_slice(spec.latent(slot, v));
        e
    };
    let s: Vec<Vec<f64>> = records.iter().map(|r| embed(r.slot, r.attrs.get(r.slot))).collect();
    let cands: Vec<Vec<f64>> = records
        .iter()
        .flat_map(|r| r.candidates.iter())
        .map(|cand| {
            let (slot, v) = vocab::token_value(cand[0], c).unwrap();
            embed(slot, v)
        })
        .collect();
    let preds = predict_from_embeddings(&Tensor::from_rows(&s).unwrap(), &Tensor::from_rows(&cands).unwrap(), &records).unwrap();
    assert!(preds.iter().zip(&records).all(|(&p, r)| p == r.answer_index));
}

#[test]
fn binomial_tail_matches_direct_sum() {
    let direct = |k: usize, n: usize, p: f64| -> f64 {
        (k..=n)
            .map(|i| {
                let choose: f64 = (0..i).map(|j| (n - j) as f64 / (j + 1) as f64).product();
                choose * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)
            })
            .sum()
    };
    for (k, n, p) in [(1, 10, 0.1), (3, 20, 0.25), (0, 5, 0.5), (7, 30, 0.01), (12, 64, 1.0 / 64.0)] {
        let got = binomial_upper_tail(k, n, p);
        let want = direct(k, n, p);
        assert!((got - want).abs() <= 1e-12 * (1.0 + want), "({k},{n},{p}): {got} vs {want}");
    }
    assert!((binomial_upper_tail(1, 10, 0.1) - (1.0 - 0.9f64.powi(10))).abs() < 1e-12);
    assert_eq!(binomial_upper_tail(11, 10, 0.1), 0.0);
}

#[test]
fn cosine_matrix_rejects_zero_rows() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    assert!(matches!(cosine_matrix(&a, &a), Err(WaveError::Degenerate(_))));
}

#[test]
fn ablation_table_has_ten_rows() {
    let run = tiny_run(2, 8);
    let (d, split) = data_for(&run);
    let table = run_fusion_ablation(&run, &d, &split, &FusionStrategy::ALL).unwrap();
    assert_eq!(table.rows.len(), 10);
    for s in FusionStrategy::ALL {
        for setting in [InputSetting::Visual, InputSetting::AudioVisual] {
            let row = table.row(s, setting).unwrap();
            assert_eq!(row.pool_size, split.siblings.len());
            assert_eq!(row.chance, 1.0 / row.pool_size as f64);
        }
    }
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 11);
    assert!(table.notes[0].contains("49.6") && table.notes[0].contains("50.5"));

    let m = WaveModel::new(run.model.clone(), LoraConfig::default(), 0).unwrap();
    let rows = ablation_rows(&m, FusionStrategy::MlpFusion, &split.siblings).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn demo_matrix_is_four_by_four() {
    let run = tiny_run(1, 4);
    let (_, split) = data_for(&run);
    let m = WaveModel::new(run.model.clone(), run.lora.clone(), 0).unwrap();
    let r = &split.qa[0];
    let (prompts, texts) = demo_inputs(&r.attrs, run.data.classes);
    let sim = prompt_aware_demo(&m, &r.source, &prompts, &texts).unwrap();
    assert_eq!(sim.shape(), &[4, 4]);
    let mut csv = Vec::new();
    write_demo_csv(&sim, &DEMO_PROMPTS, &DEMO_TEXTS, &mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);

    let mut pattern = Tensor::zeros(&[4, 4]);
    for i in 1..4 {
        pattern.data_mut()[i * 4 + i] = 1.0;
    }
    assert_eq!(demo_argmax_hits(&pattern), [true; 3]);
    pattern.data_mut()[2 * 4 + 3] = 2.0;
    assert_eq!(demo_argmax_hits(&pattern), [true, false, true]);
}

#[test]
fn report_records_both_learning_rates() {
    let run = tiny_run(1, 4);
    let (_, split) = data_for(&run);
    let m = WaveModel::new(run.model.clone(), run.lora.clone(), 0).unwrap();
    let report = evaluate_all(&m, &split, &run).unwrap();
    assert_eq!(report.retrieval.len(), 4);
    assert_eq!(report.qa.len(), 2);
    let json = report.to_json();
    assert!(json.contains("\"learning_rate\": 0.0003"));
    assert!(json.contains("\"reference_learning_rate\": 0.00002"), "{json}");
    assert_eq!(report, evaluate_all(&m, &split, &run).unwrap());
}
