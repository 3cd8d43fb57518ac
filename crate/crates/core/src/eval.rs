//! Retrieval and QA metrics, the fusion-strategy ablation and the
//! prompt-conditioning demo.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{FusionStrategy, RunConfig, REFERENCE_LEARNING_RATE};
use crate::data::vocab::{self, Media};
use crate::data::{Dataset, EvalSplit, PairRecord, QaRecord, Slot, SourceTag};
use crate::error::{Result, WaveError};
use crate::model::{MultimodalSample, WaveModel};
use crate::tensor::Tensor;
use crate::train::train;

/// Cosine similarity matrix `[a rows × b rows]`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let normalize = |t: &Tensor| -> Result<Tensor> {
        let (m, n) = t.dims2()?;
        let mut out = t.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(WaveError::Degenerate(format!("zero embedding in row {i}")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(out)
    };
    let (a, b) = (normalize(a)?, normalize(b)?);
    let (n, d) = b.dims2()?;
    a.matmul(&Tensor::new(vec![d, n], transpose(b.data(), n, d))?)
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// 0-based rank of `gold` in `scores` sorted descending, ties broken by
/// ascending index.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > g || (s == g && j < gold))
        .count()
}

/// Fraction of queries whose gold target ranks within the top `k`.
pub fn recall_at_k(sim: &Tensor, gold: &[usize], k: usize) -> Result<f64> {
    let (q, t) = sim.dims2()?;
    if t == 0 {
        return Err(WaveError::Argument("empty candidate pool".into()));
    }
    if gold.len() != q {
        return Err(WaveError::Dimension {
            op: "recall_at_k",
            lhs: vec![q, t],
            rhs: vec![gold.len()],
        });
    }
    if q == 0 {
        return Err(WaveError::Argument("no queries".into()));
    }
    let hits = (0..q).filter(|&i| rank_of(sim.row(i), gold[i]) < k).count();
    Ok(hits as f64 / q as f64)
}

/// Query and target modalities of a retrieval evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToVisual,
    VisualToAudio,
    AudioToText,
    TextToAudioVisual,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::TextToVisual,
        Direction::VisualToAudio,
        Direction::AudioToText,
        Direction::TextToAudioVisual,
    ];

    /// Pool the direction is evaluated on and whether the query is the
    /// pair's target side.
    pub fn pool(self) -> (SourceTag, bool) {
        match self {
            Direction::TextToVisual => (SourceTag::VisualText, true),
            Direction::VisualToAudio => (SourceTag::AudioVisual, true),
            Direction::AudioToText => (SourceTag::AudioText, false),
            Direction::TextToAudioVisual => (SourceTag::AvText, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::TextToVisual => "text_to_visual",
            Direction::VisualToAudio => "visual_to_audio",
            Direction::AudioToText => "audio_to_text",
            Direction::TextToAudioVisual => "text_to_audio_visual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub direction: Direction,
    pub pool_size: usize,
    pub queries: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    /// Recall@1 of a random ranking.
    pub chance: f64,
}

/// Ranks the whole pool for every query. Query `i` matches target `i`.
pub fn evaluate_pool(model: &WaveModel, queries: &[MultimodalSample], targets: &[MultimodalSample]) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(WaveError::Argument("empty candidate pool".into()));
    }
    let q = model.embed(queries)?;
    let t = model.embed(targets)?;
    cosine_matrix(&q, &t)
}

pub fn evaluate_retrieval(model: &WaveModel, pool: &[PairRecord], direction: Direction) -> Result<RetrievalMetrics> {
    let (_, query_is_target) = direction.pool();
    let (queries, targets): (Vec<_>, Vec<_>) = pool
        .iter()
        .map(|r| {
            if query_is_target {
                (r.target.clone(), r.source.clone())
            } else {
                (r.source.clone(), r.target.clone())
            }
        })
        .unzip();
    let sim = evaluate_pool(model, &queries, &targets)?;
    let gold: Vec<usize> = (0..pool.len()).collect();
    Ok(RetrievalMetrics {
        direction,
        pool_size: pool.len(),
        queries: pool.len(),
        r_at_1: recall_at_k(&sim, &gold, 1)?,
        r_at_5: recall_at_k(&sim, &gold, 5)?,
        r_at_10: recall_at_k(&sim, &gold, 10)?,
        chance: 1.0 / pool.len() as f64,
    })
}

/// Which instruction accompanies a QA clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// The record's own question.
    PerQuestion,
    /// One fixed describe-the-clip prompt for every record.
    CommonPrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaMetrics {
    pub mode: PromptMode,
    pub records: usize,
    pub candidates: usize,
    pub accuracy: f64,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Picks, per record, the candidate closest to the clip embedding.
pub fn qa_predictions(model: &WaveModel, records: &[QaRecord], mode: PromptMode) -> Result<Vec<usize>> {
    let sources: Vec<MultimodalSample> = records
        .iter()
        .map(|r| match mode {
            PromptMode::PerQuestion => r.source.clone(),
            PromptMode::CommonPrompt => r.source.with_instruction(vocab::common_prompt()),
        })
        .collect();
    let cands: Vec<MultimodalSample> = records
        .iter()
        .flat_map(|r| r.candidates.iter().map(|c| MultimodalSample::text(c.clone())))
        .collect();
    predict_from_embeddings(&model.embed(&sources)?, &model.embed(&cands)?, records)
}

/// [`qa_predictions`] on precomputed embeddings: row `i` of `s` is record
/// `i`'s clip, `c` holds every record's candidates back to back.
pub fn predict_from_embeddings(s: &Tensor, c: &Tensor, records: &[QaRecord]) -> Result<Vec<usize>> {
    let total: usize = records.iter().map(|r| r.candidates.len()).sum();
    if s.dims2()?.0 != records.len() || c.dims2()?.0 != total {
        return Err(WaveError::Dimension {
            op: "predict_from_embeddings",
            lhs: s.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let mut offset = 0;
    let mut preds = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let k = r.candidates.len();
        let scores = (0..k)
            .map(|j| crate::objectives::cosine_sim(s.row(i), c.row(offset + j)))
            .collect::<Result<Vec<_>>>()?;
        preds.push(argmax(&scores));
        offset += k;
    }
    Ok(preds)
}

pub fn evaluate_qa(model: &WaveModel, records: &[QaRecord], mode: PromptMode) -> Result<QaMetrics> {
    if records.is_empty() {
        return Err(WaveError::Argument("no QA records".into()));
    }
    let preds = qa_predictions(model, records, mode)?;
    let correct = preds
        .iter()
        .zip(records)
        .filter(|(&p, r)| p == r.answer_index)
        .count();
    Ok(QaMetrics {
        mode,
        records: records.len(),
        candidates: records[0].candidates.len(),
        accuracy: correct as f64 / records.len() as f64,
    })
}

/// `P[X >= k]` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ln_choose = |i: usize| {
        libm::lgamma(n as f64 + 1.0) - libm::lgamma(i as f64 + 1.0) - libm::lgamma((n - i) as f64 + 1.0)
    };
    (k..=n)
        .map(|i| (ln_choose(i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_digest: String,
    pub pool_size: usize,
    pub learning_rate: f64,
    pub reference_learning_rate: f64,
    pub retrieval: Vec<RetrievalMetrics>,
    pub qa: Vec<QaMetrics>,
}

impl EvalReport {
    pub fn retrieval(&self, direction: Direction) -> Option<&RetrievalMetrics> {
        self.retrieval.iter().find(|m| m.direction == direction)
    }

    pub fn qa(&self, mode: PromptMode) -> Option<&QaMetrics> {
        self.qa.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// All retrieval directions and both QA prompt modes on the held-out split.
pub fn evaluate_all(model: &WaveModel, split: &EvalSplit, run: &RunConfig) -> Result<EvalReport> {
    let retrieval = Direction::ALL
        .iter()
        .map(|&d| evaluate_retrieval(model, split.pool(d.pool().0), d))
        .collect::<Result<Vec<_>>>()?;
    let qa = [PromptMode::PerQuestion, PromptMode::CommonPrompt]
        .iter()
        .map(|&m| evaluate_qa(model, &split.qa, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        seed: run.seed,
        config_digest: run.digest(),
        pool_size: run.data.eval_pool,
        learning_rate: run.train.learning_rate,
        reference_learning_rate: REFERENCE_LEARNING_RATE,
        retrieval,
        qa,
    })
}

/// Input modalities of an ablation column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSetting {
    /// Frames only.
    Visual,
    /// Frames plus both audio streams.
    AudioVisual,
}

impl InputSetting {
    pub fn name(self) -> &'static str {
        match self {
            InputSetting::Visual => "V",
            InputSetting::AudioVisual => "A+V",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: FusionStrategy,
    pub setting: InputSetting,
    pub pool_size: usize,
    pub hits: usize,
    pub r_at_1: f64,
    pub chance: f64,
    /// One-sided binomial p-value of at least `hits` under chance.
    pub p_value: f64,
}

impl AblationRow {
    /// Significantly above chance at the given confidence (e.g. 0.99).
    pub fn beats_chance(&self, confidence: f64) -> bool {
        self.p_value < 1.0 - confidence
    }
}

pub const ABLATION_REFERENCE_NOTE: &str = "reference at 7B scale (average R@1, not reproducible here): last-layer 49.6, all-layer MLP fusion 50.5";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub notes: Vec<String>,
}

impl AblationTable {
    pub fn row(&self, strategy: FusionStrategy, setting: InputSetting) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.setting == setting)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "strategy,setting,pool_size,hits,r_at_1,chance,p_value")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{:.6},{:.6},{:e}",
                r.strategy,
                r.setting.name(),
                r.pool_size,
                r.hits,
                r.r_at_1,
                r.chance,
                r.p_value
            )?;
        }
        w.flush()
    }
}

/// Text→clip R@1 on the sibling pool for both input settings. Siblings
/// share object and speaker and differ only in sound, so frames alone can
/// at best split each couple by chance.
pub fn ablation_rows(model: &WaveModel, strategy: FusionStrategy, siblings: &[PairRecord]) -> Result<Vec<AblationRow>> {
    let queries: Vec<MultimodalSample> = siblings.iter().map(|r| r.target.clone()).collect();
    let gold: Vec<usize> = (0..siblings.len()).collect();
    let mut rows = Vec::with_capacity(2);
    for setting in [InputSetting::Visual, InputSetting::AudioVisual] {
        let targets: Vec<MultimodalSample> = siblings
            .iter()
            .map(|r| match setting {
                InputSetting::AudioVisual => r.source.clone(),
                InputSetting::Visual => MultimodalSample::visual(
                    vocab::describe(Media::Video),
                    r.source.frames.clone().expect("audio-visual source"),
                ),
            })
            .collect();
        let sim = evaluate_pool(model, &queries, &targets)?;
        let n = siblings.len();
        let hits = (0..n).filter(|&i| rank_of(sim.row(i), gold[i]) == 0).count();
        let chance = 1.0 / n as f64;
        rows.push(AblationRow {
            strategy,
            setting,
            pool_size: n,
            hits,
            r_at_1: hits as f64 / n as f64,
            chance,
            p_value: binomial_upper_tail(hits, n, chance),
        });
    }
    Ok(rows)
}

/// Trains one model per strategy with everything else fixed and evaluates
/// each on the sibling pool in both input settings.
pub fn run_fusion_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    split: &EvalSplit,
    strategies: &[FusionStrategy],
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(2 * strategies.len());
    for &s in strategies {
        let mut run = base.clone();
        run.model.fusion_strategy = s;
        let outcome = train(&run, dataset, None)?;
        log::info!("ablation: trained {s}");
        rows.extend(ablation_rows(&outcome.model, s, &split.siblings)?);
    }
    Ok(AblationTable {
        rows,
        notes: vec![ABLATION_REFERENCE_NOTE.to_string()],
    })
}

/// Labels of the demo's rows (prompts) and columns (texts).
pub const DEMO_PROMPTS: [&str; 4] = ["general", "object_question", "sound_question", "speaker_question"];
pub const DEMO_TEXTS: [&str; 4] = ["caption", "object", "sound", "speaker"];

/// The demo's prompts and texts for a clip with the given attributes: the
/// general prompt and one question per slot, against the full caption and
/// one answer per slot.
pub fn demo_inputs(attrs: &crate::data::Attributes, classes: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut prompts = vec![vocab::common_prompt()];
    let mut texts = vec![vocab::caption(attrs, true, classes)];
    for slot in Slot::ALL {
        prompts.push(vocab::question(slot));
        texts.push(vocab::answer(slot, attrs.get(slot), classes));
    }
    (prompts, texts)
}

/// Cosine similarities `[prompts × texts]` between the clip embedded under
/// each prompt and each text.
pub fn prompt_aware_demo(
    model: &WaveModel,
    clip: &MultimodalSample,
    prompts: &[Vec<u32>],
    texts: &[Vec<u32>],
) -> Result<Tensor> {
    if clip.kind.is_text() {
        return Err(WaveError::Argument("demo needs a multimodal clip".into()));
    }
    let views: Vec<MultimodalSample> = prompts.iter().map(|p| clip.with_instruction(p.clone())).collect();
    let texts: Vec<MultimodalSample> = texts.iter().map(|t| MultimodalSample::text(t.clone())).collect();
    cosine_matrix(&model.embed(&views)?, &model.embed(&texts)?)
}

pub fn write_demo_csv<W: Write>(sim: &Tensor, row_labels: &[&str], col_labels: &[&str], mut w: W) -> std::io::Result<()> {
    writeln!(w, "prompt,{}", col_labels.join(","))?;
    for (i, label) in row_labels.iter().enumerate() {
        let vals: Vec<String> = sim.row(i).iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{label},{}", vals.join(","))?;
    }
    w.flush()
}

/// Whether attribute prompt `i` (rows 1..=3) prefers its own attribute text
/// over the other two attribute texts, per prompt.
pub fn demo_argmax_hits(sim: &Tensor) -> [bool; 3] {
    std::array::from_fn(|i| {
        let row = sim.row(i + 1);
        (1..4).filter(|&j| j != i + 1).all(|j| row[i + 1] > row[j])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub samples: usize,
    /// Fraction of (clip, attribute prompt) cells whose matching text wins.
    pub prompt_hit_rate: f64,
    /// Fraction of clips for which all three attribute prompts win.
    pub sample_hit_rate: f64,
    /// Per attribute prompt (object, sound, speaker): fraction of clips
    /// where its matching text wins.
    pub per_prompt: [f64; 3],
}

/// Runs the demo on every QA clip and aggregates the argmax pattern.
pub fn demo_summary(model: &WaveModel, records: &[QaRecord], classes: usize) -> Result<DemoSummary> {
    if records.is_empty() {
        return Err(WaveError::Argument("no demo clips".into()));
    }
    let (mut cells, mut full) = (0, 0);
    let mut per = [0usize; 3];
    for r in records {
        let (prompts, texts) = demo_inputs(&r.attrs, classes);
        let hits = demo_argmax_hits(&prompt_aware_demo(model, &r.source, &prompts, &texts)?);
        for (c, &h) in per.iter_mut().zip(&hits) {
            *c += usize::from(h);
        }
        let n = hits.iter().filter(|&&h| h).count();
        cells += n;
        full += usize::from(n == 3);
    }
    Ok(DemoSummary {
        samples: records.len(),
        prompt_hit_rate: cells as f64 / (3 * records.len()) as f64,
        sample_hit_rate: full as f64 / records.len() as f64,
        per_prompt: per.map(|c| c as f64 / records.len() as f64),
    })
}
