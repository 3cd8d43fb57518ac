//! Run configuration.
//!
//! Every section rejects unknown keys and fills omitted ones with the
//! defaults below, so a config file only has to state what it changes.
//! [`RunConfig::validate`] collects every violated constraint instead of
//! stopping at the first.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, WaveError};

/// Learning rate reported for the 7B-parameter reference training run.
pub const REFERENCE_LEARNING_RATE: f64 = 2e-5;

/// Which hidden states feed a non-text embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Last token of the first transformer layer.
    FirstLayer,
    /// Last token of layer `floor(n_layers / 2)`.
    MiddleLayer,
    /// Last token of the final layer (plain last-token pooling).
    LastLayer,
    /// Softmax-weighted sum of every layer's last token.
    WeightedSum,
    /// Concatenated last tokens of all layers through a two-layer GELU MLP.
    MlpFusion,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::FirstLayer,
        FusionStrategy::MiddleLayer,
        FusionStrategy::LastLayer,
        FusionStrategy::WeightedSum,
        FusionStrategy::MlpFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::FirstLayer => "first_layer",
            FusionStrategy::MiddleLayer => "middle_layer",
            FusionStrategy::LastLayer => "last_layer",
            FusionStrategy::WeightedSum => "weighted_sum",
            FusionStrategy::MlpFusion => "mlp_fusion",
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    /// Hidden width of each block's feed-forward MLP.
    pub d_ff: usize,
    pub fusion_strategy: FusionStrategy,
    /// Hidden width of the fusion MLP; `None` means `d_model`.
    pub fusion_hidden: Option<usize>,
    pub max_seq_len: usize,
    /// Rotated channels per head, split equally over the temporal, height
    /// and width axes. Remaining head channels pass through unrotated.
    pub rotary_dim: usize,
    pub rope_base: f64,
    pub vocab_size: usize,
    pub visual_dim: usize,
    pub speech_dim: usize,
    pub audio_dim: usize,
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_embed: 32,
            d_ff: 128,
            fusion_strategy: FusionStrategy::MlpFusion,
            fusion_hidden: None,
            max_seq_len: 64,
            rotary_dim: 12,
            rope_base: 10_000.0,
            vocab_size: crate::data::vocab_size(DataConfig::default().classes),
            visual_dim: 16,
            speech_dim: 8,
            audio_dim: 16,
            max_frames: 8,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn middle_layer(&self) -> usize {
        self.n_layers / 2
    }

    pub fn fusion_hidden(&self) -> usize {
        self.fusion_hidden.unwrap_or(self.d_model)
    }

    /// Width of the concatenated all-layer last-token vector.
    pub fn fusion_input_width(&self) -> usize {
        self.n_layers * self.d_model
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        let mut bad = |cond: bool, msg: String| {
            if cond {
                errors.push(format!("model.{msg}"));
            }
        };
        bad(self.d_model == 0, "d_model must be positive".into());
        bad(self.n_layers == 0, "n_layers must be positive".into());
        bad(self.n_heads == 0, "n_heads must be positive".into());
        bad(
            self.n_heads > 0 && self.d_model % self.n_heads != 0,
            format!("d_model ({}) must be divisible by n_heads ({})", self.d_model, self.n_heads),
        );
        bad(
            self.rotary_dim == 0 || self.rotary_dim % 6 != 0,
            format!("rotary_dim ({}) must be a positive multiple of 6 (2 x 3 axes)", self.rotary_dim),
        );
        bad(
            self.n_heads > 0 && self.rotary_dim > self.head_dim(),
            format!("rotary_dim ({}) exceeds head dim ({})", self.rotary_dim, self.head_dim()),
        );
        bad(!(self.rope_base > 1.0), format!("rope_base ({}) must exceed 1", self.rope_base));
        bad(self.d_embed == 0, "d_embed must be positive".into());
        bad(self.d_ff == 0, "d_ff must be positive".into());
        bad(self.fusion_hidden == Some(0), "fusion_hidden must be positive".into());
        bad(self.max_seq_len == 0, "max_seq_len must be positive".into());
        bad(self.vocab_size == 0, "vocab_size must be positive".into());
        bad(self.visual_dim == 0, "visual_dim must be positive".into());
        bad(self.speech_dim == 0, "speech_dim must be positive".into());
        bad(self.audio_dim == 0, "audio_dim must be positive".into());
        bad(self.max_frames == 0, "max_frames must be positive".into());
    }
}

/// Low-rank adapters on every attention and MLP projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    /// Multiplier on the adapter product, i.e. `alpha / rank`.
    pub scaling: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rank: 4,
            scaling: 2.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    /// Settings of the 7B reference run: rank 128, scaling 2.0, dropout 0.05.
    pub fn reference() -> Self {
        Self {
            enabled: true,
            rank: 128,
            scaling: 2.0,
            dropout: 0.05,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.enabled && self.rank == 0 {
            errors.push("lora.rank must be >= 1 when enabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("lora.dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if !self.scaling.is_finite() {
            errors.push("lora.scaling must be finite".into());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Fixed softmax temperature applied to cosine similarities.
    pub temperature: f64,
    /// Distractor answers per QA sample.
    pub distractors: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.01,
            distractors: 3,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            errors.push(format!("objective.temperature ({}) must be > 0", self.temperature));
        }
        if self.distractors == 0 {
            errors.push("objective.distractors must be >= 1".into());
        }
    }
}

/// Optimizer and schedule.
///
/// The toy default learning rate is 3e-4; the 7B reference run used
/// [`REFERENCE_LEARNING_RATE`] (2e-5), which is far too small for a
/// randomly initialized model of this size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            steps: 3000,
            batch_size: 16,
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        // steps == 0 is allowed programmatically (returns the initialization)
        // but a config file asking for it is almost certainly a mistake.
        if self.steps == 0 {
            errors.push("train.steps must be >= 1".into());
        }
        self.validate_numbers(errors);
    }

    pub(crate) fn validate_numbers(&self, errors: &mut Vec<String>) {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            errors.push(format!("train.learning_rate ({}) must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            errors.push(format!("train.beta1 ({}) must lie in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            errors.push(format!("train.beta2 ({}) must lie in [0, 1)", self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            errors.push("train.adam_eps must be > 0".into());
        }
        if !(self.weight_decay >= 0.0) {
            errors.push("train.weight_decay must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            errors.push("train.warmup_fraction must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            errors.push("train.batch_size must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            errors.push("train.grad_clip must be > 0".into());
        }
    }
}

/// Per-group record counts for dataset generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskCounts {
    /// (visual, text) pairs.
    pub video_text: usize,
    /// (audio-visual, text) pairs.
    pub av_text: usize,
    /// (audio, visual) pairs.
    pub video_audio: usize,
    /// (audio, text) pairs.
    pub audio_text: usize,
    /// Attribute-question QA records.
    pub qa: usize,
}

impl Default for TaskCounts {
    fn default() -> Self {
        Self {
            video_text: 2048,
            av_text: 2048,
            video_audio: 2048,
            audio_text: 2048,
            qa: 6144,
        }
    }
}

impl TaskCounts {
    pub fn zero() -> Self {
        Self {
            video_text: 0,
            av_text: 0,
            video_audio: 0,
            audio_text: 0,
            qa: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.video_text + self.av_text + self.video_audio + self.audio_text + self.qa
    }

    /// Applies a `key=value` override. `retrieval` sets all four retrieval
    /// groups at once.
    pub fn set(&mut self, key: &str, value: usize) -> Result<()> {
        match key {
            "video_text" => self.video_text = value,
            "av_text" => self.av_text = value,
            "video_audio" => self.video_audio = value,
            "audio_text" => self.audio_text = value,
            "qa" => self.qa = value,
            "retrieval" => {
                self.video_text = value;
                self.av_text = value;
                self.video_audio = value;
                self.audio_text = value;
            }
            other => {
                return Err(WaveError::Argument(format!(
                    "unknown count key `{other}` (expected video_text, av_text, video_audio, \
                     audio_text, qa or retrieval)"
                )))
            }
        }
        Ok(())
    }
}

/// Synthetic data generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Semantic classes per attribute slot.
    pub classes: usize,
    pub latent_dim: usize,
    /// Standard deviation of per-frame Gaussian noise.
    pub noise: f64,
    pub visual_dim: usize,
    pub speech_dim: usize,
    pub audio_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Frame cap; longer draws are uniformly subsampled down to it.
    pub frame_cap: usize,
    pub counts: TaskCounts,
    /// Held-out pool size per evaluation group.
    pub eval_pool: usize,
    /// Emit consecutive records that share their visual content (same
    /// object and speaker) but differ in sound, so pairs in one batch can
    /// be false negatives. Stress-testing only.
    pub inject_duplicates: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 32,
            latent_dim: 8,
            noise: 0.1,
            visual_dim: 16,
            speech_dim: 8,
            audio_dim: 16,
            min_frames: 2,
            max_frames: 8,
            frame_cap: 8,
            counts: TaskCounts::default(),
            eval_pool: 128,
            inject_duplicates: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.classes < 2 {
            errors.push(format!("data.classes ({}) must be >= 2", self.classes));
        }
        if self.latent_dim == 0 {
            errors.push("data.latent_dim must be positive".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            errors.push(format!("data.noise ({}) must be >= 0", self.noise));
        }
        for (name, v) in [
            ("visual_dim", self.visual_dim),
            ("speech_dim", self.speech_dim),
            ("audio_dim", self.audio_dim),
            ("frame_cap", self.frame_cap),
        ] {
            if v == 0 {
                errors.push(format!("data.{name} must be positive"));
            }
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            errors.push(format!(
                "data.min_frames ({}) must lie in [1, max_frames = {}]",
                self.min_frames, self.max_frames
            ));
        }
        if self.eval_pool < 2 {
            errors.push("data.eval_pool must be >= 2".into());
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Existing dataset file to train on; generated from `data` when absent.
    pub data_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_path: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| WaveError::Validation(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| WaveError::io(path, e))?;
        let cfg = Self::from_toml_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section and the cross-section constraints, reporting
    /// all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.model.validate(&mut errors);
        self.lora.validate(&mut errors);
        self.objective.validate(&mut errors);
        self.train.validate(&mut errors);
        self.data.validate(&mut errors);
        let need_vocab = crate::data::vocab_size(self.data.classes);
        if self.model.vocab_size < need_vocab {
            errors.push(format!(
                "model.vocab_size ({}) is smaller than the {} tokens used by {} classes",
                self.model.vocab_size, need_vocab, self.data.classes
            ));
        }
        for (name, m, d) in [
            ("visual_dim", self.model.visual_dim, self.data.visual_dim),
            ("speech_dim", self.model.speech_dim, self.data.speech_dim),
            ("audio_dim", self.model.audio_dim, self.data.audio_dim),
        ] {
            if m != d {
                errors.push(format!("model.{name} ({m}) must equal data.{name} ({d})"));
            }
        }
        if self.model.max_frames < self.data.frame_cap {
            errors.push(format!(
                "model.max_frames ({}) is below data.frame_cap ({})",
                self.model.max_frames, self.data.frame_cap
            ));
        }
        if self.objective.distractors >= self.data.classes {
            errors.push(format!(
                "objective.distractors ({}) must be below data.classes ({})",
                self.objective.distractors, self.data.classes
            ));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(WaveError::Validation(errors))
        }
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn middle_layer_and_fusion_width() {
        let m = ModelConfig::default();
        assert_eq!(m.middle_layer(), 3);
        assert_eq!(m.fusion_input_width(), 384);
        let paper_depth = ModelConfig {
            n_layers: 28,
            ..ModelConfig::default()
        };
        // layer 15 in 1-based counting
        assert_eq!(paper_depth.middle_layer() + 1, 15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("seed = 1\n[model]\nwidth = 3\n").unwrap_err();
        assert!(matches!(err, WaveError::Validation(_)), "{err}");
    }

    #[test]
    fn validation_lists_every_bad_field() {
        let mut cfg = RunConfig::default();
        cfg.model.n_heads = 5;
        cfg.lora.dropout = 1.5;
        cfg.objective.temperature = 0.0;
        cfg.train.batch_size = 0;
        match cfg.validate() {
            Err(WaveError::Validation(errs)) => {
                let joined = errs.join("\n");
                for key in ["model.d_model", "lora.dropout", "objective.temperature", "train.batch_size"] {
                    assert!(joined.contains(key), "missing {key} in {joined}");
                }
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn count_overrides() {
        let mut c = TaskCounts::default();
        c.set("retrieval", 0).unwrap();
        assert_eq!(c.total(), c.qa);
        assert!(c.set("bogus", 1).is_err());
    }
}
