//! Unified audio-visual embeddings from a tiny multimodal transformer.
//!
//! The crate is self-contained: a reverse-mode autodiff engine
//! ([`tensor`]), the multimodal network with time-aligned rotary positions
//! and layer-fusion heads ([`model`]), contrastive and multiple-choice
//! objectives ([`objectives`]), a synthetic latent-factor data generator
//! with a task-aware batch sampler ([`data`]), and the training, evaluation
//! and ablation harness ([`train`], [`eval`]).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Result, WaveError};
