//! The multimodal transformer.
//!
//! Inputs are laid out as `[visual frames][speech, audio per frame][text]`
//! and share one pre-norm causal transformer with time-aligned rotary
//! positions. Embeddings are read from the last token: text-only inputs
//! through their own linear projection of the final layer, everything else
//! through the configured [`FusionStrategy`].

mod layout;
mod params;
mod rope;
mod sample;

pub use layout::{layout, PositionGrid, TokenSource};
pub use params::{ParamId, ParamStore};
pub use rope::{apply_tmrope, rotary_tables, AXES};
pub use sample::{ModalityKind, MultimodalSample};

pub use crate::config::FusionStrategy;

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LoraConfig, ModelConfig};
use crate::error::{Result, WaveError};
use crate::tensor::{Tape, Tensor, Var};

/// Sequences per packed forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
    lora: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    visual: Linear,
    speech: Linear,
    audio: Linear,
    blocks: Vec<Block>,
    text_head: Linear,
    pool: Linear,
    layer_logits: ParamId,
    fuse1: Linear,
    fuse2: Linear,
}

/// Hidden states of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    /// Last-token state after every block, `[n_layers × d_model]`.
    pub last_tokens: Tensor,
    /// Final-layer states of the whole sequence, `[tokens × d_model]`.
    pub final_sequence: Tensor,
}

/// Packed forward output on a tape.
pub struct PackedStates<'t> {
    /// One `[batch × d_model]` matrix of last-token states per layer.
    pub layer_last: Vec<Var<'t>>,
    pub final_hidden: Var<'t>,
    pub segments: Vec<Range<usize>>,
    pub kinds: Vec<ModalityKind>,
}

#[derive(Clone, Debug)]
pub struct WaveModel {
    cfg: ModelConfig,
    lora: LoraConfig,
    params: ParamStore,
    ids: Layout,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    // Adapters draw from their own stream so that enabling LoRA leaves the
    // base initialization untouched.
    lora_rng: ChaCha8Rng,
    lora: &'a LoraConfig,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, std: f64, trainable: bool, adapt: bool) -> Linear {
        let w = Tensor::randn(&[d_in, d_out], std, &mut self.rng);
        let w = self.store.add(format!("{name}.weight"), w, trainable);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable);
        let lora = (adapt && self.lora.enabled).then(|| {
            let r = self.lora.rank;
            let a = Tensor::randn(&[d_in, r], 1.0 / (d_in as f64).sqrt(), &mut self.lora_rng);
            let a = self.store.add(format!("{name}.lora_a"), a, true);
            let b = self.store.add(format!("{name}.lora_b"), Tensor::zeros(&[r, d_out]), true);
            (a, b)
        });
        Linear { w, b, lora }
    }

    fn norm(&mut self, name: &str, d: usize, trainable: bool) -> (ParamId, ParamId) {
        (
            self.store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), trainable),
            self.store.add(format!("{name}.beta"), Tensor::zeros(&[d]), trainable),
        )
    }
}

impl WaveModel {
    /// Randomly initialized model. With LoRA enabled the token table,
    /// norms and block projections are frozen; aligners, adapters and the
    /// heads used by the configured strategy train.
    pub fn new(cfg: ModelConfig, lora: LoraConfig, seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(&mut errors);
        lora.validate(&mut errors);
        if !errors.is_empty() {
            return Err(WaveError::Validation(errors));
        }
        let mut store = ParamStore::new();
        let base = !lora.enabled;
        let (d, l) = (cfg.d_model, cfg.n_layers);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(2 * l);
        let strategy = cfg.fusion_strategy;
        let ids = {
            let mut b = Builder {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(seed),
                lora_rng: {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    r.set_stream(1);
                    r
                },
                lora: &lora,
            };
            let embed = Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut b.rng);
            let embed = b.store.add("embed.tokens", embed, base);
            let visual = b.linear("enc.visual", cfg.visual_dim, d, inv(cfg.visual_dim), true, false);
            let speech = b.linear("enc.speech", cfg.speech_dim, d, inv(cfg.speech_dim), true, false);
            let audio = b.linear("enc.audio", cfg.audio_dim, d, inv(cfg.audio_dim), true, false);
            let blocks = (0..l)
                .map(|i| {
                    let p = format!("blocks.{i}");
                    Block {
                        ln1: b.norm(&format!("{p}.ln1"), d, base),
                        q: b.linear(&format!("{p}.attn.q"), d, d, inv(d), base, true),
                        k: b.linear(&format!("{p}.attn.k"), d, d, inv(d), base, true),
                        v: b.linear(&format!("{p}.attn.v"), d, d, inv(d), base, true),
                        o: b.linear(&format!("{p}.attn.o"), d, d, inv(d) * resid, base, true),
                        ln2: b.norm(&format!("{p}.ln2"), d, base),
                        fc1: b.linear(&format!("{p}.mlp.fc1"), d, cfg.d_ff, inv(d), base, true),
                        fc2: b.linear(&format!("{p}.mlp.fc2"), cfg.d_ff, d, inv(cfg.d_ff) * resid, base, true),
                    }
                })
                .collect();
            let text_head = b.linear("head.text", d, cfg.d_embed, inv(d), true, false);
            let single = matches!(
                strategy,
                FusionStrategy::FirstLayer | FusionStrategy::MiddleLayer | FusionStrategy::LastLayer
            );
            let weighted = strategy == FusionStrategy::WeightedSum;
            let mlp = strategy == FusionStrategy::MlpFusion;
            let pool = b.linear("head.pool", d, cfg.d_embed, inv(d), single || weighted, false);
            let layer_logits = b.store.add("head.layer_logits", Tensor::zeros(&[l]), weighted);
            let (fi, fh) = (cfg.fusion_input_width(), cfg.fusion_hidden());
            let fuse1 = b.linear("head.fusion.fc1", fi, fh, inv(fi), mlp, false);
            let fuse2 = b.linear("head.fusion.fc2", fh, cfg.d_embed, inv(fh), mlp, false);
            Layout {
                embed,
                visual,
                speech,
                audio,
                blocks,
                text_head,
                pool,
                layer_logits,
                fuse1,
                fuse2,
            }
        };
        Ok(Self {
            cfg,
            lora,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn lora_config(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.params.load(path)
    }

    /// Names of the frozen backbone parameters (token table, norms and
    /// block projections, excluding adapters).
    pub fn base_parameter_names(&self) -> Vec<String> {
        self.params
            .ids()
            .map(|id| self.params.name(id))
            .filter(|n| (n.starts_with("blocks.") && !n.contains(".lora_")) || n.starts_with("embed."))
            .map(str::to_string)
            .collect()
    }

    /// Input embeddings and positions of one sample.
    pub fn encode_modalities(&self, sample: &MultimodalSample) -> Result<(Tensor, PositionGrid)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (x, grids, _) = self.embed_inputs(&tape, &p, &[sample])?;
        Ok((x.to_tensor(), grids.into_iter().next().expect("one sample")))
    }

    /// Eval-mode forward pass of one sample.
    pub fn forward(&self, sample: &MultimodalSample) -> Result<LayerStates> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let st = self.forward_packed(&tape, &p, &[sample], None)?;
        let layers: Vec<Var> = st.layer_last.clone();
        let last = tape.concat(&layers, 0)?.to_tensor();
        Ok(LayerStates {
            last_tokens: last,
            final_sequence: st.final_hidden.to_tensor(),
        })
    }

    /// Embedding of one sample's states under the configured strategy.
    pub fn extract_embedding(&self, states: &LayerStates, kind: ModalityKind) -> Result<Tensor> {
        self.extract_embedding_with(states, kind, self.cfg.fusion_strategy)
    }

    pub fn extract_embedding_with(
        &self,
        states: &LayerStates,
        kind: ModalityKind,
        strategy: FusionStrategy,
    ) -> Result<Tensor> {
        let (l, d) = states.last_tokens.dims2()?;
        if l != self.cfg.n_layers || d != self.cfg.d_model {
            return Err(WaveError::Dimension {
                op: "extract_embedding",
                lhs: vec![l, d],
                rhs: vec![self.cfg.n_layers, self.cfg.d_model],
            });
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let layers: Vec<Var> = (0..l)
            .map(|i| tape.constant(Tensor::new(vec![1, d], states.last_tokens.row(i).to_vec()).expect("row")))
            .collect();
        let out = if kind.is_text() {
            self.apply_linear(layers[l - 1], &self.ids.text_head, &p, &mut None)?
        } else {
            self.fuse(&tape, &p, &layers, strategy)?
        };
        out.to_tensor().reshape(&[self.cfg.d_embed])
    }

    /// Eval-mode embeddings `[samples × d_embed]` under the configured strategy.
    pub fn embed(&self, samples: &[MultimodalSample]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(samples.len() * self.cfg.d_embed);
        for chunk in samples.chunks(EVAL_CHUNK) {
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            let refs: Vec<&MultimodalSample> = chunk.iter().collect();
            let e = self.embed_on_tape(&tape, &p, &refs, None)?;
            data.extend_from_slice(e.value().data());
        }
        Tensor::new(vec![samples.len(), self.cfg.d_embed], data)
    }

    /// Differentiable embeddings of a packed batch, `[samples × d_embed]`.
    pub fn embed_on_tape<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        samples: &[&MultimodalSample],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let st = self.forward_packed(tape, p, samples, dropout)?;
        self.embed_states(tape, p, &st, self.cfg.fusion_strategy)
    }

    /// Applies the output heads to packed states.
    pub fn embed_states<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        st: &PackedStates<'t>,
        strategy: FusionStrategy,
    ) -> Result<Var<'t>> {
        let l = self.cfg.n_layers;
        let text_rows: Vec<usize> = (0..st.kinds.len()).filter(|&i| st.kinds[i].is_text()).collect();
        let media_rows: Vec<usize> = (0..st.kinds.len()).filter(|&i| !st.kinds[i].is_text()).collect();
        if media_rows.is_empty() {
            return self.apply_linear(st.layer_last[l - 1], &self.ids.text_head, p, &mut None);
        }
        if text_rows.is_empty() {
            return self.fuse(tape, p, &st.layer_last, strategy);
        }
        let text_in = st.layer_last[l - 1].gather_rows(&text_rows)?;
        let text_out = self.apply_linear(text_in, &self.ids.text_head, p, &mut None)?;
        let media_in = st
            .layer_last
            .iter()
            .map(|v| v.gather_rows(&media_rows))
            .collect::<Result<Vec<_>>>()?;
        let media_out = self.fuse(tape, p, &media_in, strategy)?;
        let joined = tape.concat(&[text_out, media_out], 0)?;
        let mut order = vec![0; st.kinds.len()];
        for (pos, &i) in text_rows.iter().chain(&media_rows).enumerate() {
            order[i] = pos;
        }
        joined.gather_rows(&order)
    }

    fn fuse<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        layers: &[Var<'t>],
        strategy: FusionStrategy,
    ) -> Result<Var<'t>> {
        let pool = &self.ids.pool;
        match strategy {
            FusionStrategy::FirstLayer => self.apply_linear(layers[0], pool, p, &mut None),
            FusionStrategy::MiddleLayer => {
                self.apply_linear(layers[self.cfg.middle_layer()], pool, p, &mut None)
            }
            FusionStrategy::LastLayer => {
                self.apply_linear(layers[layers.len() - 1], pool, p, &mut None)
            }
            FusionStrategy::WeightedSum => {
                let w = p[self.ids.layer_logits.0].softmax();
                let mut acc = layers[0].scale_by(w, 0)?;
                for (i, &layer) in layers.iter().enumerate().skip(1) {
                    acc = acc.add(layer.scale_by(w, i)?)?;
                }
                self.apply_linear(acc, pool, p, &mut None)
            }
            FusionStrategy::MlpFusion => {
                let x = tape.concat(layers, 1)?;
                let h = self.apply_linear(x, &self.ids.fuse1, p, &mut None)?.gelu();
                self.apply_linear(h, &self.ids.fuse2, p, &mut None)
            }
        }
    }

    fn apply_linear<'t>(
        &self,
        x: Var<'t>,
        lin: &Linear,
        p: &[Var<'t>],
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let y = x.matmul(p[lin.w.0])?.add_row(p[lin.b.0])?;
        let Some((a, b)) = lin.lora else {
            return Ok(y);
        };
        let x_in = match dropout {
            Some(rng) if self.lora.dropout > 0.0 => {
                let keep = 1.0 - self.lora.dropout;
                let shape = x.shape();
                let mask: Vec<f64> = (0..shape.iter().product::<usize>())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.mul(x.tape().constant(Tensor::new(shape, mask)?))?
            }
            _ => x,
        };
        let delta = x_in.matmul(p[a.0])?.matmul(p[b.0])?.scale(self.lora.scaling);
        y.add(delta)
    }

    /// Packed input embeddings `[tokens × d_model]`, per-sample grids and
    /// segment ranges.
    fn embed_inputs<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        samples: &[&MultimodalSample],
    ) -> Result<(Var<'t>, Vec<PositionGrid>, Vec<Range<usize>>)> {
        if samples.is_empty() {
            return Err(WaveError::EmptyBatch);
        }
        let cfg = &self.cfg;
        let mut text_ids = Vec::new();
        let (mut vis, mut sp, mut au) = (Vec::new(), Vec::new(), Vec::new());
        // (part, index within part) for every packed token
        let mut order = Vec::new();
        let mut grids = Vec::with_capacity(samples.len());
        let mut segments = Vec::with_capacity(samples.len());
        for s in samples {
            let (tokens, grid) = layout(s, cfg)?;
            let start = order.len();
            for tok in tokens {
                match tok {
                    TokenSource::Text(t) => {
                        order.push((0, text_ids.len()));
                        text_ids.push(t as usize);
                    }
                    TokenSource::Frame(f) => {
                        order.push((1, vis.len() / cfg.visual_dim));
                        vis.extend_from_slice(s.frames.as_ref().expect("validated").row(f));
                    }
                    TokenSource::Speech(f) => {
                        order.push((2, sp.len() / cfg.speech_dim));
                        sp.extend_from_slice(s.speech.as_ref().expect("validated").row(f));
                    }
                    TokenSource::Audio(f) => {
                        order.push((3, au.len() / cfg.audio_dim));
                        au.extend_from_slice(s.audio.as_ref().expect("validated").row(f));
                    }
                }
            }
            segments.push(start..order.len());
            grids.push(grid);
        }

        let mut parts = Vec::new();
        let mut offsets = [0usize; 4];
        let mut rows = 0;
        let mut add_part = |slot: usize, v: Var<'t>, n: usize, parts: &mut Vec<Var<'t>>| {
            offsets[slot] = rows;
            rows += n;
            parts.push(v);
        };
        if !text_ids.is_empty() {
            let n = text_ids.len();
            add_part(0, p[self.ids.embed.0].gather_rows(&text_ids)?, n, &mut parts);
        }
        for (slot, data, width, lin) in [
            (1, vis, cfg.visual_dim, &self.ids.visual),
            (2, sp, cfg.speech_dim, &self.ids.speech),
            (3, au, cfg.audio_dim, &self.ids.audio),
        ] {
            if data.is_empty() {
                continue;
            }
            let n = data.len() / width;
            let x = tape.constant(Tensor::new(vec![n, width], data)?);
            add_part(slot, self.apply_linear(x, lin, p, &mut None)?, n, &mut parts);
        }
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let index: Vec<usize> = order.iter().map(|&(slot, i)| offsets[slot] + i).collect();
        let x = if index.iter().enumerate().all(|(i, &j)| i == j) {
            stacked
        } else {
            stacked.gather_rows(&index)?
        };
        Ok((x, grids, segments))
    }

    /// Runs all blocks over a packed batch. `dropout` enables LoRA-branch
    /// dropout (training mode).
    pub fn forward_packed<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        samples: &[&MultimodalSample],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<PackedStates<'t>> {
        let cfg = &self.cfg;
        let (mut x, grids, segments) = self.embed_inputs(tape, p, samples)?;
        let ids: Vec<[usize; 3]> = grids.iter().flat_map(|g| g.ids().iter().copied()).collect();
        let (cos, sin) = rotary_tables(&ids, cfg.rotary_dim, cfg.rope_base);
        let last: Vec<usize> = segments.iter().map(|s| s.end - 1).collect();
        let mut layer_last = Vec::with_capacity(cfg.n_layers);
        for blk in &self.ids.blocks {
            let h = x.layer_norm(p[blk.ln1.0 .0], p[blk.ln1.1 .0])?;
            let q = self.apply_linear(h, &blk.q, p, &mut dropout)?;
            let k = self.apply_linear(h, &blk.k, p, &mut dropout)?;
            let v = self.apply_linear(h, &blk.v, p, &mut dropout)?;
            let q = tape.rotary(q, cos.clone(), sin.clone(), cfg.n_heads, cfg.rotary_dim)?;
            let k = tape.rotary(k, cos.clone(), sin.clone(), cfg.n_heads, cfg.rotary_dim)?;
            let a = tape.attention(q, k, v, segments.clone(), cfg.n_heads)?;
            x = x.add(self.apply_linear(a, &blk.o, p, &mut dropout)?)?;
            let h = x.layer_norm(p[blk.ln2.0 .0], p[blk.ln2.1 .0])?;
            let h = self.apply_linear(h, &blk.fc1, p, &mut dropout)?.gelu();
            x = x.add(self.apply_linear(h, &blk.fc2, p, &mut dropout)?)?;
            layer_last.push(x.gather_rows(&last)?);
        }
        Ok(PackedStates {
            layer_last,
            final_hidden: x,
            segments,
            kinds: samples.iter().map(|s| s.kind).collect(),
        })
    }
}
