use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SourceTag, TaskTag};
use crate::error::{Result, WaveError};

/// Indices of one homogeneous mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBatchPlan {
    pub task: TaskTag,
    pub source_tag: SourceTag,
    pub indices: Vec<usize>,
}

/// Task-aware sampler: every batch draws from a single (task, source)
/// group. An epoch permutes each group, cuts it into full batches (the
/// remainder waits for the next epoch) and shuffles the batches across
/// groups.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    groups: Vec<(SourceTag, Vec<usize>)>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(WaveError::Argument("batch size 0".into()));
        }
        let mut by_group: BTreeMap<SourceTag, Vec<usize>> = BTreeMap::new();
        for (i, r) in dataset.records.iter().enumerate() {
            by_group.entry(r.source_tag()).or_default().push(i);
        }
        let mut groups = Vec::new();
        for (tag, idx) in by_group {
            if idx.len() < batch_size {
                log::warn!(
                    "dropping group ({:?}, {tag}): {} samples < batch size {batch_size}",
                    tag.task(),
                    idx.len()
                );
            } else {
                groups.push((tag, idx));
            }
        }
        if groups.is_empty() {
            return Err(WaveError::EmptyEpoch { batch_size });
        }
        Ok(Self {
            groups,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Groups that survived the size filter.
    pub fn groups(&self) -> impl Iterator<Item = SourceTag> + '_ {
        self.groups.iter().map(|(t, _)| *t)
    }

    pub fn epoch(&mut self) -> Vec<TaskBatchPlan> {
        let mut plans = Vec::new();
        for (tag, idx) in &self.groups {
            let mut perm = idx.clone();
            perm.shuffle(&mut self.rng);
            for chunk in perm.chunks_exact(self.batch_size) {
                plans.push(TaskBatchPlan {
                    task: tag.task(),
                    source_tag: *tag,
                    indices: chunk.to_vec(),
                });
            }
        }
        plans.shuffle(&mut self.rng);
        plans
    }
}

/// Endless stream of batch plans, epoch after epoch.
pub fn sample_batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = TaskBatchPlan>> {
    let mut sampler = BatchSampler::new(dataset, batch_size, seed)?;
    Ok(std::iter::repeat(()).flat_map(move |_| sampler.epoch()))
}
