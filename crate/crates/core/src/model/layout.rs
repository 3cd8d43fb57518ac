use crate::config::ModelConfig;
use crate::error::{Result, WaveError};

use super::sample::MultimodalSample;

/// Where one input token comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Text(u32),
    /// Row of the visual frame matrix.
    Frame(usize),
    Speech(usize),
    Audio(usize),
}

/// Per-token `(temporal, height, width)` position ids.
///
/// Text tokens take the running counter on all three axes. A media block
/// places frame `i` at temporal id `base + i` (height and width stay 0),
/// where `base` is the counter at the start of the block; afterwards the
/// counter resumes one past the largest id the block used.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositionGrid {
    ids: Vec<[usize; 3]>,
    next_text: usize,
}

impl PositionGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_text(&mut self) {
        let p = self.next_text;
        self.ids.push([p, p, p]);
        self.next_text += 1;
    }

    /// Appends one media block; `frames` lists the frame index of each token.
    pub fn push_block(&mut self, frames: &[usize]) {
        let base = self.next_text;
        let mut max = None;
        for &f in frames {
            self.ids.push([base + f, 0, 0]);
            max = max.max(Some(base + f));
        }
        if let Some(m) = max {
            self.next_text = m + 1;
        }
    }

    pub fn ids(&self) -> &[[usize; 3]] {
        &self.ids
    }

    pub fn temporal(&self) -> Vec<usize> {
        self.ids.iter().map(|p| p[0]).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn next_text(&self) -> usize {
        self.next_text
    }
}

/// Token order of a sample: visual frames, then the audio streams
/// interleaved frame by frame (speech before audio), then the instruction or
/// the text tokens.
pub fn layout(sample: &MultimodalSample, cfg: &ModelConfig) -> Result<(Vec<TokenSource>, PositionGrid)> {
    sample.validate(cfg)?;
    let len = sample.seq_len();
    if len > cfg.max_seq_len {
        return Err(WaveError::Capacity {
            len,
            max: cfg.max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(len);
    let mut grid = PositionGrid::new();
    let mut block = Vec::new();

    for f in 0..sample.frame_count() {
        tokens.push(TokenSource::Frame(f));
        block.push(f);
    }
    for f in 0..sample.audio_len() {
        if sample.speech.is_some() {
            tokens.push(TokenSource::Speech(f));
            block.push(f);
        }
        if sample.audio.is_some() {
            tokens.push(TokenSource::Audio(f));
            block.push(f);
        }
    }
    grid.push_block(&block);
    for &t in sample.instruction.iter().chain(&sample.text) {
        tokens.push(TokenSource::Text(t));
        grid.push_text();
    }
    Ok((tokens, grid))
}
