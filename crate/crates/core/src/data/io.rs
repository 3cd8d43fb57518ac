//! Line-delimited JSON dataset files.
//!
//! Line 1 is the [`DatasetHeader`]; each further line is one record. Feature
//! matrices are stored as `{rows, cols, data}` with `data` the base64 of the
//! little-endian f64 values, so parsing reproduces every bit.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::vocab::{Attributes, Slot};
use super::{Dataset, DatasetHeader, PairRecord, QaRecord, Record, SourceTag};
use crate::error::{Result, WaveError};
use crate::model::{ModalityKind, MultimodalSample};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "wavekit-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: String,
}

impl MatrixRepr {
    fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.dims2().expect("feature matrix");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            rows,
            cols,
            data: B64.encode(bytes),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| WaveError::format("dataset", format!("base64: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(WaveError::format(
                "dataset",
                format!("{} payload bytes for a {}x{} matrix", bytes.len(), self.rows, self.cols),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(vec![self.rows, self.cols], data)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRepr {
    kind: ModalityKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    instruction: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    text: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<MatrixRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    speech: Option<MatrixRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio: Option<MatrixRepr>,
}

impl SampleRepr {
    fn from_sample(s: &MultimodalSample) -> Self {
        Self {
            kind: s.kind,
            instruction: s.instruction.clone(),
            text: s.text.clone(),
            frames: s.frames.as_ref().map(MatrixRepr::from_tensor),
            speech: s.speech.as_ref().map(MatrixRepr::from_tensor),
            audio: s.audio.as_ref().map(MatrixRepr::from_tensor),
        }
    }

    fn into_sample(self) -> Result<MultimodalSample> {
        let conv = |m: Option<MatrixRepr>| m.map(|m| m.to_tensor()).transpose();
        Ok(MultimodalSample {
            kind: self.kind,
            instruction: self.instruction,
            text: self.text,
            frames: conv(self.frames)?,
            speech: conv(self.speech)?,
            audio: conv(self.audio)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RecordRepr {
    Pair {
        id: u64,
        source_tag: SourceTag,
        attrs: Attributes,
        source: SampleRepr,
        target: SampleRepr,
    },
    Qa {
        id: u64,
        attrs: Attributes,
        slot: Slot,
        source: SampleRepr,
        candidates: Vec<Vec<u32>>,
        answer_index: usize,
    },
}

impl RecordRepr {
    fn from_record(r: &Record) -> Self {
        match r {
            Record::Pair(p) => RecordRepr::Pair {
                id: p.id,
                source_tag: p.source_tag,
                attrs: p.attrs,
                source: SampleRepr::from_sample(&p.source),
                target: SampleRepr::from_sample(&p.target),
            },
            Record::Qa(q) => RecordRepr::Qa {
                id: q.id,
                attrs: q.attrs,
                slot: q.slot,
                source: SampleRepr::from_sample(&q.source),
                candidates: q.candidates.clone(),
                answer_index: q.answer_index,
            },
        }
    }

    fn into_record(self) -> Result<Record> {
        Ok(match self {
            RecordRepr::Pair {
                id,
                source_tag,
                attrs,
                source,
                target,
            } => Record::Pair(PairRecord {
                id,
                source_tag,
                attrs,
                source: source.into_sample()?,
                target: target.into_sample()?,
            }),
            RecordRepr::Qa {
                id,
                attrs,
                slot,
                source,
                candidates,
                answer_index,
            } => {
                if answer_index >= candidates.len() {
                    return Err(WaveError::format(
                        "dataset",
                        format!("record {id}: answer index {answer_index} of {}", candidates.len()),
                    ));
                }
                Record::Qa(QaRecord {
                    id,
                    attrs,
                    slot,
                    source: source.into_sample()?,
                    candidates,
                    answer_index,
                })
            }
        })
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &dataset.header)?;
    w.write_all(b"\n")?;
    for r in &dataset.records {
        serde_json::to_writer(&mut w, &RecordRepr::from_record(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| WaveError::format("dataset", "missing header line"))?;
    let header = header.map_err(|e| WaveError::format("dataset", e.to_string()))?;
    let header: DatasetHeader = serde_json::from_str(&header)
        .map_err(|e| WaveError::format("dataset", format!("header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(WaveError::format(
            "dataset",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| WaveError::format("dataset", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let repr: RecordRepr = serde_json::from_str(&line)
            .map_err(|e| WaveError::format("dataset", format!("line {}: {e}", i + 1)))?;
        records.push(repr.into_record()?);
    }
    Ok(Dataset { header, records })
}

impl Dataset {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| WaveError::io(path, e))?;
        write_dataset(self, std::io::BufWriter::new(f)).map_err(|e| WaveError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| WaveError::io(path, e))?;
        read_dataset(std::io::BufReader::new(f))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(self, &mut out).expect("in-memory write");
        out
    }
}
