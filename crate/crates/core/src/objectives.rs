//! Contrastive retrieval and multiple-choice QA losses over cosine
//! similarities scaled by a fixed temperature.

use crate::config::ObjectiveConfig;
use crate::error::{Result, WaveError};
use crate::tensor::Var;

/// Role of a row in an [`EmbeddingBatch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
    Distractor,
}

/// Source, target and optional distractor embeddings of one batch.
///
/// Distractors are stored sample-major: rows `i·n .. (i+1)·n` belong to
/// source `i`.
#[derive(Clone, Copy)]
pub struct EmbeddingBatch<'t> {
    pub source: Var<'t>,
    pub target: Var<'t>,
    pub distractors: Option<(Var<'t>, usize)>,
}

impl<'t> EmbeddingBatch<'t> {
    pub fn retrieval(source: Var<'t>, target: Var<'t>) -> Result<Self> {
        let b = Self {
            source,
            target,
            distractors: None,
        };
        b.check()?;
        Ok(b)
    }

    pub fn qa(source: Var<'t>, answer: Var<'t>, distractors: Var<'t>, n: usize) -> Result<Self> {
        let b = Self {
            source,
            target: answer,
            distractors: Some((distractors, n)),
        };
        b.check()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.source.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Role of every row, in source, target, distractor order.
    pub fn roles(&self) -> Vec<Role> {
        let n = self.len();
        let mut roles = vec![Role::Source; n];
        roles.extend(std::iter::repeat(Role::Target).take(n));
        if let Some((_, k)) = self.distractors {
            roles.extend(std::iter::repeat(Role::Distractor).take(n * k));
        }
        roles
    }

    fn check(&self) -> Result<()> {
        let s = self.source.shape();
        let t = self.target.shape();
        if s.len() != 2 || s != t {
            return Err(WaveError::Dimension {
                op: "embedding batch",
                lhs: s,
                rhs: t,
            });
        }
        if let Some((d, n)) = self.distractors {
            let ds = d.shape();
            if n == 0 {
                return Err(WaveError::Argument("QA batch with zero distractors".into()));
            }
            if ds.len() != 2 || ds[0] != s[0] * n || ds[1] != s[1] {
                return Err(WaveError::Dimension {
                    op: "distractors",
                    lhs: ds,
                    rhs: vec![s[0] * n, s[1]],
                });
            }
        }
        Ok(())
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(WaveError::Dimension {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(WaveError::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

fn check_temperature(cfg: &ObjectiveConfig) -> Result<f64> {
    if !(cfg.temperature > 0.0) {
        return Err(WaveError::Argument(format!("temperature {}", cfg.temperature)));
    }
    Ok(1.0 / cfg.temperature)
}

/// Symmetric in-batch InfoNCE: the mean of the source→target and
/// target→source cross-entropies over `S_ij = cos(s_i, t_j) / τ`, where
/// every non-matching pair in the batch is a negative.
pub fn retrieval_loss<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    if batch.distractors.is_some() {
        return Err(WaveError::Argument("retrieval loss on a QA batch".into()));
    }
    let inv_tau = check_temperature(cfg)?;
    let n = batch.len();
    if n == 0 {
        return Err(WaveError::EmptyBatch);
    }
    let s = batch.source.normalize_rows()?;
    let t = batch.target.normalize_rows()?;
    let logits = s.matmul(t.transpose()?)?.scale(inv_tau);
    let diag: Vec<usize> = (0..n).collect();
    let forward = logits.softmax_cross_entropy(&diag)?;
    let backward = logits.transpose()?.softmax_cross_entropy(&diag)?;
    Ok(forward.add(backward)?.scale(0.5))
}

/// Multiple-choice loss: for each source, cross-entropy over
/// `[cos(s, answer), cos(s, distractor_1), …] / τ` with the answer at index 0.
/// Other samples' candidates are not negatives.
pub fn qa_loss<'t>(batch: &EmbeddingBatch<'t>, cfg: &ObjectiveConfig) -> Result<Var<'t>> {
    let (distractors, k) = batch
        .distractors
        .ok_or_else(|| WaveError::Argument("QA loss needs distractors".into()))?;
    let inv_tau = check_temperature(cfg)?;
    let n = batch.len();
    if n == 0 {
        return Err(WaveError::EmptyBatch);
    }
    let tape = batch.source.tape();
    let candidates = tape.concat(&[batch.target, distractors], 0)?;
    let mut order = Vec::with_capacity(n * (k + 1));
    let mut repeat = Vec::with_capacity(n * (k + 1));
    for i in 0..n {
        order.push(i);
        order.extend((0..k).map(|j| n + i * k + j));
        repeat.extend(std::iter::repeat(i).take(k + 1));
    }
    let candidates = candidates.gather_rows(&order)?.normalize_rows()?;
    let sources = batch.source.normalize_rows()?.gather_rows(&repeat)?;
    let logits = sources
        .mul(candidates)?
        .row_sums()?
        .reshape(&[n, k + 1])?
        .scale(inv_tau);
    logits.softmax_cross_entropy(&vec![0; n])
}
