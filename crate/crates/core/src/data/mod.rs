//! Synthetic audio-visual clips with known latent semantics.
//!
//! A clip has an object, a sound and a speaker, each one of `classes`
//! values. The object and speaker are visible, the speaker is heard in the
//! speech stream, and object and sound are heard in the audio-event stream.
//! Text is a short token sequence naming slot values (see [`vocab`]).
//! Records are grouped by task and source the same way the training
//! mixture is: visual-text, audio-visual-text, audio-visual (audio, visual)
//! and audio-text retrieval pairs, plus attribute QA.

mod io;
mod latent;
mod sampler;
pub mod vocab;

pub use io::{read_dataset, write_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use latent::LatentSpec;
pub use sampler::{sample_batches, BatchSampler, TaskBatchPlan};
pub use vocab::{vocab_size, Attributes, Slot};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, TaskCounts};
use crate::error::{Result, WaveError};
use crate::model::MultimodalSample;
use vocab::Media;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Retrieval,
    Qa,
}

/// Dataset group a record was generated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    /// (visual, text)
    #[serde(rename = "synth-vt")]
    VisualText,
    /// (audio-visual, text)
    #[serde(rename = "synth-avt")]
    AvText,
    /// (audio, visual)
    #[serde(rename = "synth-va")]
    AudioVisual,
    /// (audio, text)
    #[serde(rename = "synth-at")]
    AudioText,
    /// attribute questions over audio-visual clips
    #[serde(rename = "synth-qa")]
    Qa,
}

impl SourceTag {
    pub const RETRIEVAL: [SourceTag; 4] = [
        SourceTag::VisualText,
        SourceTag::AvText,
        SourceTag::AudioVisual,
        SourceTag::AudioText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::VisualText => "synth-vt",
            SourceTag::AvText => "synth-avt",
            SourceTag::AudioVisual => "synth-va",
            SourceTag::AudioText => "synth-at",
            SourceTag::Qa => "synth-qa",
        }
    }

    pub fn task(self) -> TaskTag {
        match self {
            SourceTag::Qa => TaskTag::Qa,
            _ => TaskTag::Retrieval,
        }
    }

    fn group(self) -> u64 {
        self as u64
    }

    fn count(self, counts: &TaskCounts) -> usize {
        match self {
            SourceTag::VisualText => counts.video_text,
            SourceTag::AvText => counts.av_text,
            SourceTag::AudioVisual => counts.video_audio,
            SourceTag::AudioText => counts.audio_text,
            SourceTag::Qa => counts.qa,
        }
    }
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A retrieval pair `(s, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: u64,
    pub source_tag: SourceTag,
    pub attrs: Attributes,
    pub source: MultimodalSample,
    pub target: MultimodalSample,
}

/// An audio-visual clip with a question about one slot and `n + 1`
/// candidate answers.
#[derive(Clone, Debug, PartialEq)]
pub struct QaRecord {
    pub id: u64,
    pub attrs: Attributes,
    pub slot: Slot,
    pub source: MultimodalSample,
    pub candidates: Vec<Vec<u32>>,
    pub answer_index: usize,
}

impl QaRecord {
    pub fn answer(&self) -> &[u32] {
        &self.candidates[self.answer_index]
    }

    pub fn distractors(&self) -> impl Iterator<Item = &Vec<u32>> {
        let a = self.answer_index;
        self.candidates
            .iter()
            .enumerate()
            .filter(move |&(i, _)| i != a)
            .map(|(_, c)| c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Pair(PairRecord),
    Qa(QaRecord),
}

impl Record {
    pub fn id(&self) -> u64 {
        match self {
            Record::Pair(p) => p.id,
            Record::Qa(q) => q.id,
        }
    }

    pub fn source_tag(&self) -> SourceTag {
        match self {
            Record::Pair(p) => p.source_tag,
            Record::Qa(_) => SourceTag::Qa,
        }
    }

    pub fn task(&self) -> TaskTag {
        self.source_tag().task()
    }

    pub fn attrs(&self) -> &Attributes {
        match self {
            Record::Pair(p) => &p.attrs,
            Record::Qa(q) => &q.attrs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    /// Digest of the generating data config and seed.
    pub spec_digest: String,
    pub seed: u64,
    pub counts: TaskCounts,
    pub distractors: usize,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn count(&self, tag: SourceTag) -> usize {
        self.records.iter().filter(|r| r.source_tag() == tag).count()
    }
}

/// Held-out evaluation pools.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit {
    /// Per retrieval source: pairs with pairwise distinct (object, speaker).
    pub pairs: Vec<(SourceTag, Vec<PairRecord>)>,
    pub qa: Vec<QaRecord>,
    /// Audio-visual/text pairs arranged in sibling couples `(2j, 2j+1)`
    /// that share object and speaker but differ in sound: visual content
    /// alone cannot tell siblings apart.
    pub siblings: Vec<PairRecord>,
}

impl EvalSplit {
    pub fn pool(&self, tag: SourceTag) -> &[PairRecord] {
        self.pairs
            .iter()
            .find(|(t, _)| *t == tag)
            .map_or(&[], |(_, p)| p.as_slice())
    }
}

const TRAIN_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = 2 << 40;
const SIBLING_STREAM: u64 = 3 << 40;

/// Counter-based generator: record `k` of group `g` always sees the same
/// random stream, whatever order records are produced in.
fn stream_rng(seed: u64, base: u64, group: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(base | (group << 32) | k);
    rng
}

/// Per-group relabelling of class ids; keeps balance and distinctness of the
/// enumeration in [`combo`] while decorrelating groups.
fn label_perms(seed: u64, base: u64, group: u64, classes: usize) -> [Vec<usize>; 3] {
    let mut rng = stream_rng(seed, base, group, u32::MAX as u64);
    std::array::from_fn(|_| {
        let mut p: Vec<usize> = (0..classes).collect();
        p.shuffle(&mut rng);
        p
    })
}

/// Attribute combination of record `k`. Objects cycle fastest, so every
/// block of `classes` consecutive records covers each object, sound and
/// speaker exactly once, and the first `classes²` records have distinct
/// (object, speaker). With `siblings`, record `2j+1` repeats the object and
/// speaker of `2j` with the next sound.
fn combo(k: usize, classes: usize, perms: &[Vec<usize>; 3], siblings: bool) -> Attributes {
    let base = if siblings { k / 2 } else { k };
    let (o, q) = (base % classes, base / classes);
    let p = (q + o) % classes;
    let mut a = (o + 2 * q + q / classes) % classes;
    if siblings && k % 2 == 1 {
        a = (a + 1) % classes;
    }
    Attributes {
        object: perms[0][o],
        sound: perms[1][a],
        speaker: perms[2][p],
    }
}

fn frame_count(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(cfg.min_frames..=cfg.max_frames)
}

/// Frame indices kept when `n` frames exceed `cap`: evenly spaced,
/// including the first and last frame.
pub fn subsample_frames(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    if cap == 1 {
        return vec![0];
    }
    (0..cap)
        .map(|i| (i * (n - 1) + (cap - 1) / 2) / (cap - 1))
        .collect()
}

struct Clip {
    frames: crate::tensor::Tensor,
    speech: crate::tensor::Tensor,
    audio: crate::tensor::Tensor,
}

fn render_clip(spec: &LatentSpec, cfg: &DataConfig, attrs: &Attributes, rng: &mut ChaCha8Rng) -> Result<Clip> {
    let n = frame_count(cfg, rng);
    let keep = subsample_frames(n, cfg.frame_cap);
    let pick = |t: crate::tensor::Tensor| -> Result<crate::tensor::Tensor> {
        let cols = t.shape()[1];
        let data = keep.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        crate::tensor::Tensor::new(vec![keep.len(), cols], data)
    };
    let frames = pick(spec.render_visual(attrs, n, rng))?;
    let speech = pick(spec.render_speech(attrs, n, rng))?;
    let audio = pick(spec.render_audio(attrs, n, rng))?;
    Ok(Clip { frames, speech, audio })
}

fn make_pair(
    spec: &LatentSpec,
    cfg: &DataConfig,
    tag: SourceTag,
    id: u64,
    attrs: Attributes,
    rng: &mut ChaCha8Rng,
) -> Result<PairRecord> {
    let c = spec.classes;
    let clip = render_clip(spec, cfg, &attrs, rng)?;
    let audio_only = |clip: &Clip| {
        MultimodalSample::audio(
            vocab::describe(Media::Audio),
            Some(clip.speech.clone()),
            Some(clip.audio.clone()),
        )
    };
    let (source, target) = match tag {
        SourceTag::VisualText => (
            MultimodalSample::visual(vocab::describe(Media::Video), clip.frames),
            MultimodalSample::text(vocab::caption(&attrs, false, c)),
        ),
        SourceTag::AvText => (
            MultimodalSample::audio_visual(
                vocab::describe(Media::AudioVisual),
                clip.frames,
                Some(clip.speech),
                Some(clip.audio),
            ),
            MultimodalSample::text(vocab::caption(&attrs, true, c)),
        ),
        SourceTag::AudioVisual => (
            audio_only(&clip),
            MultimodalSample::visual(vocab::describe(Media::Video), clip.frames),
        ),
        SourceTag::AudioText => (
            audio_only(&clip),
            MultimodalSample::text(vocab::caption(&attrs, true, c)),
        ),
        SourceTag::Qa => return Err(WaveError::Argument("QA is not a pair source".into())),
    };
    Ok(PairRecord {
        id,
        source_tag: tag,
        attrs,
        source,
        target,
    })
}

/// Builds a QA record asking about `slot` of an audio-visual clip.
///
/// Distractors are drawn without replacement, first from the values of the
/// clip's other slots (present in the clip, but not what was asked), then
/// from other values of the asked slot. Candidates are shuffled; the answer
/// position is stored.
pub fn make_qa_record(
    spec: &LatentSpec,
    cfg: &DataConfig,
    id: u64,
    attrs: Attributes,
    slot: Slot,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QaRecord> {
    let c = spec.classes;
    if n == 0 || n >= c {
        return Err(WaveError::Argument(format!(
            "{n} distractors for {c} classes (need 1 <= n < classes)"
        )));
    }
    let clip = render_clip(spec, cfg, &attrs, rng)?;
    let source = MultimodalSample::audio_visual(
        vocab::question(slot),
        clip.frames,
        Some(clip.speech),
        Some(clip.audio),
    );
    let truth = attrs.get(slot);
    let mut present: Vec<Vec<u32>> = Slot::ALL
        .iter()
        .filter(|&&s| s != slot)
        .map(|&s| vocab::answer(s, attrs.get(s), c))
        .collect();
    present.shuffle(rng);
    present.truncate(n);
    let extra = n - present.len();
    let others: Vec<usize> = (0..c).filter(|&v| v != truth).collect();
    let mut distractors = present;
    for i in sample_indices(rng, others.len(), extra) {
        distractors.push(vocab::answer(slot, others[i], c));
    }
    let answer_index = rng.gen_range(0..=n);
    let mut candidates = distractors;
    candidates.insert(answer_index, vocab::answer(slot, truth, c));
    Ok(QaRecord {
        id,
        attrs,
        slot,
        source,
        candidates,
        answer_index,
    })
}

fn make_record(
    spec: &LatentSpec,
    cfg: &DataConfig,
    tag: SourceTag,
    k: usize,
    perms: &[Vec<usize>; 3],
    distractors: usize,
    rng: &mut ChaCha8Rng,
    siblings: bool,
) -> Result<Record> {
    let attrs = combo(k, spec.classes, perms, siblings);
    let id = (tag.group() << 32) | k as u64;
    Ok(match tag {
        SourceTag::Qa => {
            let slot = Slot::ALL[rng.gen_range(0..3)];
            Record::Qa(make_qa_record(spec, cfg, id, attrs, slot, distractors, rng)?)
        }
        _ => Record::Pair(make_pair(spec, cfg, tag, id, attrs, rng)?),
    })
}

/// Generates the training mixture described by `cfg.counts`.
pub fn generate_dataset(spec: &LatentSpec, cfg: &DataConfig, distractors: usize, seed: u64) -> Result<Dataset> {
    let mut records = Vec::with_capacity(cfg.counts.total());
    for tag in SourceTag::RETRIEVAL.into_iter().chain([SourceTag::Qa]) {
        let perms = label_perms(seed, TRAIN_STREAM, tag.group(), spec.classes);
        for k in 0..tag.count(&cfg.counts) {
            let mut rng = stream_rng(seed, TRAIN_STREAM, tag.group(), k as u64);
            let dup = cfg.inject_duplicates && tag != SourceTag::Qa;
            records.push(make_record(spec, cfg, tag, k, &perms, distractors, &mut rng, dup)?);
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            spec_digest: spec.digest().to_string(),
            seed,
            counts: cfg.counts.clone(),
            distractors,
            data: cfg.clone(),
        },
        records,
    })
}

/// Held-out pools of `cfg.eval_pool` records per retrieval source and for
/// QA, plus the sibling pool, drawn from streams disjoint from training.
pub fn generate_eval_split(spec: &LatentSpec, cfg: &DataConfig, distractors: usize, seed: u64) -> Result<EvalSplit> {
    let n = cfg.eval_pool;
    let mut pairs = Vec::new();
    for tag in SourceTag::RETRIEVAL {
        let perms = label_perms(seed, EVAL_STREAM, tag.group(), spec.classes);
        let pool = (0..n)
            .map(|k| {
                let mut rng = stream_rng(seed, EVAL_STREAM, tag.group(), k as u64);
                let attrs = combo(k, spec.classes, &perms, false);
                make_pair(spec, cfg, tag, (tag.group() << 32) | k as u64, attrs, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        pairs.push((tag, pool));
    }
    let qa_perms = label_perms(seed, EVAL_STREAM, SourceTag::Qa.group(), spec.classes);
    let qa = (0..n)
        .map(|k| {
            let mut rng = stream_rng(seed, EVAL_STREAM, SourceTag::Qa.group(), k as u64);
            match make_record(spec, cfg, SourceTag::Qa, k, &qa_perms, distractors, &mut rng, false)? {
                Record::Qa(q) => Ok(q),
                Record::Pair(_) => unreachable!("QA tag yields QA records"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let sib_perms = label_perms(seed, SIBLING_STREAM, SourceTag::AvText.group(), spec.classes);
    let siblings = (0..n - n % 2)
        .map(|k| {
            let mut rng = stream_rng(seed, SIBLING_STREAM, SourceTag::AvText.group(), k as u64);
            let attrs = combo(k, spec.classes, &sib_perms, true);
            make_pair(spec, cfg, SourceTag::AvText, k as u64, attrs, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSplit { pairs, qa, siblings })
}
