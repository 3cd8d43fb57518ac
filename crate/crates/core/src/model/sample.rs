use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Result, WaveError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    TextOnly,
    VisualOnly,
    AudioOnly,
    AudioVisual,
}

impl ModalityKind {
    pub fn is_text(self) -> bool {
        self == ModalityKind::TextOnly
    }
}

/// One model input.
///
/// Text-only inputs carry their tokens in `text` and no instruction. Every
/// other kind carries a non-empty `instruction` that is appended after the
/// media tokens, and feature matrices with one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub kind: ModalityKind,
    pub instruction: Vec<u32>,
    pub text: Vec<u32>,
    /// `[frames × visual_dim]`
    pub frames: Option<Tensor>,
    /// `[frames × speech_dim]`
    pub speech: Option<Tensor>,
    /// `[frames × audio_dim]`
    pub audio: Option<Tensor>,
}

impl MultimodalSample {
    pub fn text(tokens: Vec<u32>) -> Self {
        Self {
            kind: ModalityKind::TextOnly,
            instruction: Vec::new(),
            text: tokens,
            frames: None,
            speech: None,
            audio: None,
        }
    }

    pub fn visual(instruction: Vec<u32>, frames: Tensor) -> Self {
        Self {
            kind: ModalityKind::VisualOnly,
            instruction,
            text: Vec::new(),
            frames: Some(frames),
            speech: None,
            audio: None,
        }
    }

    pub fn audio(instruction: Vec<u32>, speech: Option<Tensor>, audio: Option<Tensor>) -> Self {
        Self {
            kind: ModalityKind::AudioOnly,
            instruction,
            text: Vec::new(),
            frames: None,
            speech,
            audio,
        }
    }

    pub fn audio_visual(
        instruction: Vec<u32>,
        frames: Tensor,
        speech: Option<Tensor>,
        audio: Option<Tensor>,
    ) -> Self {
        Self {
            kind: ModalityKind::AudioVisual,
            instruction,
            text: Vec::new(),
            frames: Some(frames),
            speech,
            audio,
        }
    }

    /// Same media under a different instruction.
    pub fn with_instruction(&self, instruction: Vec<u32>) -> Self {
        Self {
            instruction,
            ..self.clone()
        }
    }

    /// Number of audio frames (0 when no stream is present).
    pub fn audio_len(&self) -> usize {
        self.speech
            .as_ref()
            .or(self.audio.as_ref())
            .map_or(0, |t| t.shape()[0])
    }

    pub fn frame_count(&self) -> usize {
        self.frames.as_ref().map_or(0, |t| t.shape()[0])
    }

    /// Tokens the sample occupies in the model's input sequence.
    pub fn seq_len(&self) -> usize {
        let streams = usize::from(self.speech.is_some()) + usize::from(self.audio.is_some());
        self.frame_count() + streams * self.audio_len() + self.instruction.len() + self.text.len()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let has_frames = self.frames.is_some();
        let has_audio = self.speech.is_some() || self.audio.is_some();
        let shape_ok = match self.kind {
            ModalityKind::TextOnly => !has_frames && !has_audio,
            ModalityKind::VisualOnly => has_frames && !has_audio,
            ModalityKind::AudioOnly => !has_frames && has_audio,
            ModalityKind::AudioVisual => has_frames && has_audio,
        };
        if !shape_ok {
            return Err(WaveError::Argument(format!(
                "{:?} sample with frames={has_frames}, audio={has_audio}",
                self.kind
            )));
        }
        if self.kind.is_text() {
            if self.text.is_empty() {
                return Err(WaveError::Argument("text sample without tokens".into()));
            }
        } else if self.instruction.is_empty() {
            return Err(WaveError::Argument(format!(
                "{:?} sample without an instruction",
                self.kind
            )));
        }
        if let Some(&tok) = self
            .instruction
            .iter()
            .chain(&self.text)
            .find(|&&t| t as usize >= cfg.vocab_size)
        {
            return Err(WaveError::Argument(format!(
                "token {tok} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        for (what, t, width) in [
            ("frames", &self.frames, cfg.visual_dim),
            ("speech", &self.speech, cfg.speech_dim),
            ("audio", &self.audio, cfg.audio_dim),
        ] {
            if let Some(t) = t {
                let (n, w) = t.dims2()?;
                if w != width {
                    return Err(WaveError::Dimension {
                        op: what,
                        lhs: t.shape().to_vec(),
                        rhs: vec![n, width],
                    });
                }
                if n == 0 {
                    return Err(WaveError::Argument(format!("empty {what} stream")));
                }
                if n > cfg.max_frames {
                    return Err(WaveError::Capacity {
                        len: n,
                        max: cfg.max_frames,
                    });
                }
            }
        }
        if let (Some(s), Some(a)) = (&self.speech, &self.audio) {
            if s.shape()[0] != a.shape()[0] {
                return Err(WaveError::Alignment(format!(
                    "speech stream has {} frames, audio stream {}",
                    s.shape()[0],
                    a.shape()[0]
                )));
            }
        }
        Ok(())
    }
}
