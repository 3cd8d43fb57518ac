//! Optimization loop.
//!
//! Batches come from the task-aware sampler. Retrieval batches embed both
//! sides in one packed pass and use the symmetric InfoNCE loss; QA batches
//! embed the sources with their questions plus every candidate answer and use
//! the multiple-choice loss. Only trainable parameters are updated, with
//! AdamW (decoupled weight decay), linear warmup followed by a constant
//! rate, and global-norm gradient clipping.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ObjectiveConfig, RunConfig, TrainConfig};
use crate::data::{BatchSampler, Dataset, Record, SourceTag, TaskBatchPlan, TaskTag};
use crate::error::{Result, WaveError};
use crate::model::{MultimodalSample, ParamId, WaveModel};
use crate::objectives::{qa_loss, retrieval_loss, EmbeddingBatch};
use crate::tensor::{Tape, Tensor};

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub task: TaskTag,
    pub source: SourceTag,
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

pub fn write_loss_trace<W: Write>(trace: &[LossPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,task,source,loss,learning_rate,grad_norm")?;
    for p in trace {
        let task = match p.task {
            TaskTag::Retrieval => "retrieval",
            TaskTag::Qa => "qa",
        };
        writeln!(
            w,
            "{},{task},{},{:e},{:e},{:e}",
            p.step, p.source, p.loss, p.learning_rate, p.grad_norm
        )?;
    }
    w.flush()
}

/// Learning rate at `step` (0-based): linear warmup over the first
/// `ceil(warmup_fraction · steps)` steps, constant afterwards.
pub fn learning_rate_at(cfg: &TrainConfig, step: usize) -> f64 {
    let warmup = (cfg.warmup_fraction * cfg.steps as f64).ceil() as usize;
    if step < warmup {
        cfg.learning_rate * (step + 1) as f64 / warmup as f64
    } else {
        cfg.learning_rate
    }
}

/// AdamW state for the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(model: &WaveModel, cfg: &TrainConfig) -> Self {
        let store = model.params();
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let zeros = |id: &ParamId| vec![0.0; store.get(*id).numel()];
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update; `grads[i]` belongs to `params()[i]`.
    pub fn step(&mut self, model: &mut WaveModel, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let store = model.params_mut();
        for (i, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p[j] -= lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Loss of one planned batch on `tape`, with LoRA dropout drawn from `rng`
/// when given.
pub fn batch_loss<'t>(
    model: &WaveModel,
    tape: &'t Tape,
    p: &[crate::tensor::Var<'t>],
    dataset: &Dataset,
    plan: &TaskBatchPlan,
    objective: &ObjectiveConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<crate::tensor::Var<'t>> {
    let n = plan.indices.len();
    match plan.task {
        TaskTag::Retrieval => {
            let mut samples: Vec<&MultimodalSample> = Vec::with_capacity(2 * n);
            let mut targets = Vec::with_capacity(n);
            for &i in &plan.indices {
                let Record::Pair(r) = &dataset.records[i] else {
                    return Err(WaveError::Argument(format!("record {i} is not a pair")));
                };
                samples.push(&r.source);
                targets.push(&r.target);
            }
            samples.extend(targets);
            let e = model.embed_on_tape(tape, p, &samples, rng)?;
            let batch = EmbeddingBatch::retrieval(e.slice(0, 0, n)?, e.slice(0, n, n)?)?;
            retrieval_loss(&batch, objective)
        }
        TaskTag::Qa => {
            let mut sources = Vec::with_capacity(n);
            let mut answers = Vec::with_capacity(n);
            let mut distractors = Vec::new();
            let mut k = None;
            for &i in &plan.indices {
                let Record::Qa(r) = &dataset.records[i] else {
                    return Err(WaveError::Argument(format!("record {i} is not a QA record")));
                };
                let nd = r.candidates.len() - 1;
                if *k.get_or_insert(nd) != nd {
                    return Err(WaveError::Argument("QA batch with mixed distractor counts".into()));
                }
                sources.push(&r.source);
                answers.push(MultimodalSample::text(r.answer().to_vec()));
                distractors.extend(r.distractors().map(|d| MultimodalSample::text(d.clone())));
            }
            let k = k.unwrap_or(0);
            let mut samples = sources;
            samples.extend(answers.iter());
            samples.extend(distractors.iter());
            let e = model.embed_on_tape(tape, p, &samples, rng)?;
            let batch = EmbeddingBatch::qa(
                e.slice(0, 0, n)?,
                e.slice(0, n, n)?,
                e.slice(0, 2 * n, n * k)?,
                k,
            )?;
            qa_loss(&batch, objective)
        }
    }
}

/// Stateful training loop over one dataset.
pub struct Trainer<'d> {
    pub model: WaveModel,
    dataset: &'d Dataset,
    objective: ObjectiveConfig,
    cfg: TrainConfig,
    sampler: BatchSampler,
    queue: std::vec::IntoIter<TaskBatchPlan>,
    optimizer: AdamW,
    dropout_rng: ChaCha8Rng,
    step: usize,
    pub trace: Vec<LossPoint>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: WaveModel,
        dataset: &'d Dataset,
        objective: ObjectiveConfig,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate_numbers(&mut errors);
        objective.validate(&mut errors);
        if !errors.is_empty() {
            return Err(WaveError::Validation(errors));
        }
        if dataset.records.is_empty() {
            return Err(WaveError::Argument("training on an empty dataset".into()));
        }
        let sampler = BatchSampler::new(dataset, cfg.batch_size, seed)?;
        let optimizer = AdamW::new(&model, &cfg);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        dropout_rng.set_stream(1);
        Ok(Self {
            model,
            dataset,
            objective,
            cfg,
            sampler,
            queue: Vec::new().into_iter(),
            optimizer,
            dropout_rng,
            step: 0,
            trace: Vec::new(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn next_plan(&mut self) -> TaskBatchPlan {
        loop {
            if let Some(p) = self.queue.next() {
                return p;
            }
            self.queue = self.sampler.epoch().into_iter();
        }
    }

    /// Runs one optimization step and returns its loss.
    pub fn step(&mut self) -> Result<f64> {
        let plan = self.next_plan();
        let lr = learning_rate_at(&self.cfg, self.step);
        let (loss, mut grads) = {
            let tape = Tape::new();
            let p = self.model.params().bind(&tape, true);
            let loss = batch_loss(
                &self.model,
                &tape,
                &p,
                self.dataset,
                &plan,
                &self.objective,
                Some(&mut self.dropout_rng),
            )?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(WaveError::Divergence {
                    step: self.step,
                    loss: value,
                });
            }
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor> = self.optimizer.params().iter().map(|id| g.take(p[id.0])).collect();
            (value, grads)
        };
        let norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !norm.is_finite() {
            return Err(WaveError::Divergence {
                step: self.step,
                loss: norm,
            });
        }
        self.optimizer.step(&mut self.model, &grads, lr);
        self.trace.push(LossPoint {
            step: self.step,
            task: plan.task,
            source: plan.source_tag,
            loss,
            learning_rate: lr,
            grad_norm: norm,
        });
        self.step += 1;
        Ok(loss)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: WaveModel,
    pub trace: Vec<LossPoint>,
}

/// Builds a model from `run` and trains it for `run.train.steps` steps.
/// When `checkpoint_dir` is given and `checkpoint_every > 0`, intermediate
/// checkpoints `step-<n>.ckpt` are written there.
pub fn train(run: &RunConfig, dataset: &Dataset, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = WaveModel::new(run.model.clone(), run.lora.clone(), run.seed)?;
    let mut trainer = Trainer::new(model, dataset, run.objective.clone(), run.train.clone(), run.seed)?;
    for _ in 0..run.train.steps {
        trainer.step()?;
        let done = trainer.steps_done();
        if let Some(dir) = checkpoint_dir {
            if run.train.checkpoint_every > 0 && done % run.train.checkpoint_every == 0 && done < run.train.steps {
                trainer.model.save(&dir.join(format!("step-{done}.ckpt")))?;
            }
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        trace: trainer.trace,
    })
}
