//! The task-conditioned transformer encoder.
//!
//! Layout: a frozen token + position embedding, an optional conditional
//! alignment, `n_layers` post-norm transformer layers and one decoder head per
//! task. Layers in the frozen set are plain transformer layers whose weights
//! never train; the remaining layers carry conditional attention and
//! conditional layer normalization when those modules are enabled. The
//! bottleneck either sits on the top layers or forms a skip path.

pub mod alignment;
pub mod attention;
pub mod bottleneck;
pub mod config;
pub mod head;
pub mod norm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{ConditioningError, EmbeddingInit, TaskEmbeddingTable};
use crate::init::{normal, rng_from_seed, xavier, ModelRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use alignment::ConditionalAlignmentSite;
pub use attention::{attention, ConditionalAttentionSite};
pub use bottleneck::{BottleneckWeights, ConditionalBottleneckSite};
pub use config::{AttentionVariant, BottleneckVariant, ModelConfig, ResolvedConfig};
pub use head::{DecoderHead, TaskKind};
pub use norm::{layer_norm, ConditionalLayerNormSite, LayerNormParams, NormAffine, NormSite};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence length mismatch: site built for {expected}, input has {found}")]
    SequenceLength { expected: usize, found: usize },
    #[error("bottleneck variant mismatch: operation needs {expected:?}, site is {found:?}")]
    VariantMismatch {
        expected: BottleneckVariant,
        found: BottleneckVariant,
    },
    #[error("decoder head for `{head}` cannot serve task `{task}`")]
    HeadMismatch { head: String, task: String },
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Token { id: u32, vocab: usize },
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Supervision for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Output of a read-only forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Probs(Vec<f64>),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    index: usize,
    frozen: bool,
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ff_in: (ParamId, ParamId),
    ff_out: (ParamId, ParamId),
    attention: Option<ConditionalAttentionSite>,
    norm1: NormSite,
    norm2: NormSite,
    bottleneck: Option<ConditionalBottleneckSite>,
}

impl EncoderLayer {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn attention(&self) -> Option<&ConditionalAttentionSite> {
        self.attention.as_ref()
    }

    pub fn norms(&self) -> (&NormSite, &NormSite) {
        (&self.norm1, &self.norm2)
    }

    pub fn bottleneck(&self) -> Option<&ConditionalBottleneckSite> {
        self.bottleneck.as_ref()
    }

    /// The layer's own transformer weights (excludes attached adapters).
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (w, b) in [self.q, self.k, self.v, self.out, self.ff_in, self.ff_out] {
            ids.push(w);
            ids.push(b);
        }
        for n in [&self.norm1, &self.norm2] {
            ids.push(n.inherited().gamma);
            ids.push(n.inherited().beta);
        }
        ids
    }
}

struct LayerWeights {
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    out: (Var, Var),
    ff_in: (Var, Var),
    ff_out: (Var, Var),
    attn_bias: Option<Var>,
    norm1: NormAffine,
    norm2: NormAffine,
    bottleneck: Option<BottleneckWeights>,
}

/// Everything that depends only on the task, resolved once on a tape and
/// shared by every sample of that task.
pub struct TaskContext {
    task: Option<String>,
    alignment: Option<Var>,
    layers: Vec<LayerWeights>,
    skip: Vec<BottleneckWeights>,
}

impl TaskContext {
    pub fn task(&self) -> Option<&str> {
        self.task.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaMtlModel {
    config: ModelConfig,
    resolved: ResolvedConfig,
    store: ParamStore,
    token_embedding: ParamId,
    position_embedding: ParamId,
    alignment: Option<ConditionalAlignmentSite>,
    layers: Vec<EncoderLayer>,
    skip: Vec<ConditionalBottleneckSite>,
    tasks: TaskEmbeddingTable,
    heads: Vec<DecoderHead>,
    rng: ModelRng,
}

fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, trainable: bool, rng: &mut ModelRng) -> Result<(ParamId, ParamId)> {
    let w = store.add(
        format!("{name}.weight"),
        xavier(fan_in, fan_out, rng).with_requires_grad(trainable),
    )?;
    let b = store.add(
        format!("{name}.bias"),
        Tensor::zeros(&[fan_out]).with_requires_grad(trainable),
    )?;
    Ok((w, b))
}

impl CaMtlModel {
    pub fn new(config: ModelConfig, tasks: &[(String, TaskKind)], seed: u64) -> Result<Self> {
        let resolved = config.resolve()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;

        let token_embedding = store.add("embedding.token", normal(&[config.vocab_size, d], 1.0, &mut rng))?;
        let position_embedding =
            store.add("embedding.position", normal(&[config.seq_len, d], 0.5, &mut rng))?;

        let alignment = if config.conditional_alignment {
            Some(ConditionalAlignmentSite::new(&mut store, "alignment", d, d)?)
        } else {
            None
        };

        let mut layers = Vec::with_capacity(config.n_layers);
        for index in 0..config.n_layers {
            let frozen = resolved.frozen_layers.contains(&index);
            let trainable = !frozen;
            let p = format!("encoder.layer.{index}");
            let q = linear(&mut store, &format!("{p}.attn.q"), d, d, trainable, &mut rng)?;
            let k = linear(&mut store, &format!("{p}.attn.k"), d, d, trainable, &mut rng)?;
            let v = linear(&mut store, &format!("{p}.attn.v"), d, d, trainable, &mut rng)?;
            let out = linear(&mut store, &format!("{p}.attn.out"), d, d, trainable, &mut rng)?;
            let attention = match config.attention_variant {
                AttentionVariant::None => None,
                _ if frozen => None,
                variant => Some(ConditionalAttentionSite::new(
                    &mut store,
                    &format!("{p}.attn.cond"),
                    variant,
                    config.seq_len,
                    resolved.blocks,
                    d,
                    &mut rng,
                )?),
            };
            let conditional_norm = config.conditional_layer_norm && !frozen;
            let make_norm = |store: &mut ParamStore, name: String| -> Result<NormSite> {
                Ok(if conditional_norm {
                    NormSite::Conditional(ConditionalLayerNormSite::new(
                        store,
                        &name,
                        d,
                        d,
                        !config.freeze_ln_affine,
                    )?)
                } else {
                    NormSite::Plain(LayerNormParams::new(store, &name, d, trainable)?)
                })
            };
            let norm1 = make_norm(&mut store, format!("{p}.norm1"))?;
            let ff_in = linear(&mut store, &format!("{p}.ff.in"), d, resolved.ff_dim, trainable, &mut rng)?;
            let ff_out = linear(&mut store, &format!("{p}.ff.out"), resolved.ff_dim, d, trainable, &mut rng)?;
            let norm2 = make_norm(&mut store, format!("{p}.norm2"))?;
            let bottleneck = if resolved.bottleneck_layers.contains(&index) {
                Some(ConditionalBottleneckSite::new(
                    &mut store,
                    &format!("{p}.bottleneck"),
                    BottleneckVariant::BaseTop,
                    d,
                    resolved.bottleneck_width,
                    d,
                    &mut rng,
                )?)
            } else {
                None
            };
            layers.push(EncoderLayer {
                index,
                frozen,
                q,
                k,
                v,
                out,
                ff_in,
                ff_out,
                attention,
                norm1,
                norm2,
                bottleneck,
            });
        }

        let mut skip = Vec::new();
        if config.bottleneck_variant == BottleneckVariant::LargeSkip {
            for index in 0..config.n_layers {
                skip.push(ConditionalBottleneckSite::new(
                    &mut store,
                    &format!("skip.{index}"),
                    BottleneckVariant::LargeSkip,
                    d,
                    resolved.bottleneck_width,
                    d,
                    &mut rng,
                )?);
            }
        }

        let names: Vec<String> = tasks.iter().map(|(n, _)| n.clone()).collect();
        let table = TaskEmbeddingTable::new(&mut store, &names, d, &mut rng)?;
        let mut heads = Vec::with_capacity(tasks.len());
        for (name, kind) in tasks {
            heads.push(DecoderHead::new(&mut store, name, *kind, d, &mut rng)?);
        }

        Ok(CaMtlModel {
            config,
            resolved,
            store,
            token_embedding,
            position_embedding,
            alignment,
            layers,
            skip,
            tasks: table,
            heads,
            rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn resolved(&self) -> &ResolvedConfig {
        &self.resolved
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding_params(&self) -> [ParamId; 2] {
        [self.token_embedding, self.position_embedding]
    }

    pub fn alignment(&self) -> Option<&ConditionalAlignmentSite> {
        self.alignment.as_ref()
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn skip_sites(&self) -> &[ConditionalBottleneckSite] {
        &self.skip
    }

    pub fn tasks(&self) -> &TaskEmbeddingTable {
        &self.tasks
    }

    pub fn heads(&self) -> &[DecoderHead] {
        &self.heads
    }

    pub fn head(&self, task: &str) -> Result<&DecoderHead> {
        let i = self.tasks.index(task)?;
        Ok(&self.heads[i])
    }

    /// Parameters that never train: the embedding layer and every frozen
    /// layer's own weights.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut ids = self.embedding_params().to_vec();
        for layer in self.layers.iter().filter(|l| l.frozen) {
            ids.extend(layer.base_params());
        }
        ids
    }

    pub fn freeze_all(&mut self) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    /// Registers a new task: one embedding row plus a decoder head.
    pub fn add_task(&mut self, name: &str, kind: TaskKind, init: &EmbeddingInit) -> Result<()> {
        kind.validate().map_err(ModelError::Config)?;
        if self.tasks.index(name).is_ok() {
            return Err(ConditioningError::DuplicateTask(name.to_string()).into());
        }
        let mut rng = self.rng.clone();
        let head = DecoderHead::new(&mut self.store, name, kind, self.config.d_model, &mut rng)?;
        self.tasks.extend(&mut self.store, name, init, &mut rng)?;
        self.heads.push(head);
        self.rng = rng;
        Ok(())
    }

    fn layer_weights<'a>(&'a self, tape: &Tape<'a>, layer: &EncoderLayer, z: Option<Var>) -> Result<LayerWeights> {
        let s = &self.store;
        let pair = |(w, b): (ParamId, ParamId)| (tape.param(s, w), tape.param(s, b));
        let (attn_bias, norm1, norm2, bottleneck) = match z {
            Some(z) => (
                match &layer.attention {
                    Some(site) => Some(site.conditional_matrix(tape, s, z)?),
                    None => None,
                },
                layer.norm1.affine(tape, s, z)?,
                layer.norm2.affine(tape, s, z)?,
                match &layer.bottleneck {
                    Some(b) => Some(b.weights(tape, s, z)?),
                    None => None,
                },
            ),
            None => (
                None,
                layer.norm1.inherited().affine(tape, s),
                layer.norm2.inherited().affine(tape, s),
                None,
            ),
        };
        Ok(LayerWeights {
            q: pair(layer.q),
            k: pair(layer.k),
            v: pair(layer.v),
            out: pair(layer.out),
            ff_in: pair(layer.ff_in),
            ff_out: pair(layer.ff_out),
            attn_bias,
            norm1,
            norm2,
            bottleneck,
        })
    }

    /// Resolves every conditional weight for `task`.
    pub fn context<'a>(&'a self, tape: &Tape<'a>, task: &str) -> Result<TaskContext> {
        let z = self.tasks.embed_task(tape, &self.store, task)?;
        let alignment = match &self.alignment {
            Some(site) => Some(site.matrix(tape, &self.store, z)?),
            None => None,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| self.layer_weights(tape, l, Some(z)))
            .collect::<Result<Vec<_>>>()?;
        let skip = self
            .skip
            .iter()
            .map(|s| s.weights(tape, &self.store, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskContext {
            task: Some(task.to_string()),
            alignment,
            layers,
            skip,
        })
    }

    /// The underlying plain transformer: same base weights, no alignment, no
    /// conditional bias, inherited layer-norm affines and no bottleneck.
    pub fn plain_context<'a>(&'a self, tape: &Tape<'a>) -> Result<TaskContext> {
        let layers = self
            .layers
            .iter()
            .map(|l| self.layer_weights(tape, l, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskContext {
            task: None,
            alignment: None,
            layers,
            skip: Vec::new(),
        })
    }

    /// Token ids padded with [`PAD_ID`] or truncated to the sequence length.
    pub fn fit_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        let l = self.config.seq_len;
        let mut ids = Vec::with_capacity(l);
        for &t in tokens.iter().take(l) {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::Token {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
            ids.push(t as usize);
        }
        ids.resize(l, PAD_ID as usize);
        Ok(ids)
    }

    /// Embedding output, after alignment when the context has one: the input
    /// to the first transformer layer.
    pub fn embed<'a>(&'a self, tape: &Tape<'a>, ctx: &TaskContext, tokens: &[u32]) -> Result<Var> {
        let ids = self.fit_tokens(tokens)?;
        let tok = tape.param(&self.store, self.token_embedding);
        let x = tape.gather_rows(tok, &ids)?;
        let x = tape.add(x, tape.param(&self.store, self.position_embedding))?;
        Ok(match ctx.alignment {
            Some(r) => tape.matmul(x, r)?,
            None => x,
        })
    }

    /// `[L × d]` encoder output for one sequence.
    pub fn encode<'a>(&'a self, tape: &Tape<'a>, ctx: &TaskContext, tokens: &[u32]) -> Result<Var> {
        let ids = self.fit_tokens(tokens)?;
        let padded: Vec<bool> = ids.iter().map(|&i| i == PAD_ID as usize).collect();
        let mask = attention::key_mask(tape, &padded);
        let mut x = self.embed(tape, ctx, tokens)?;
        let mut skip_state = None;
        for (i, w) in ctx.layers.iter().enumerate() {
            x = self.layer_forward(tape, w, x, mask)?;
            if let Some(sw) = ctx.skip.get(i) {
                skip_state = Some(bottleneck::skip_state(tape, x, skip_state, sw)?);
            }
        }
        if let Some(s) = skip_state {
            x = tape.add(x, s)?;
        }
        Ok(x)
    }

    fn layer_forward(&self, tape: &Tape<'_>, w: &LayerWeights, x: Var, mask: Option<Var>) -> Result<Var> {
        let affine = |input: Var, (weight, bias): (Var, Var)| -> Result<Var> {
            let y = tape.matmul(input, weight)?;
            Ok(tape.add_row(y, bias)?)
        };
        let q = affine(x, w.q)?;
        let k = affine(x, w.k)?;
        let v = affine(x, w.v)?;
        let heads = self.config.n_heads;
        let attended = if heads == 1 {
            attention(tape, q, k, v, w.attn_bias, mask)?
        } else {
            let dh = self.resolved.head_dim;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                outs.push(attention(tape, qh, kh, vh, w.attn_bias, mask)?);
            }
            tape.concat_cols(&outs)?
        };
        let o = affine(attended, w.out)?;
        let x1 = layer_norm(tape, tape.add(x, o)?, w.norm1)?;
        let hidden = tape.gelu(affine(x1, w.ff_in)?);
        let f = affine(hidden, w.ff_out)?;
        let mut x2 = layer_norm(tape, tape.add(x1, f)?, w.norm2)?;
        if let Some(b) = &w.bottleneck {
            x2 = bottleneck::residual(tape, x2, b)?;
        }
        Ok(x2)
    }

    /// Full encoder pass for one sequence of `task`.
    pub fn encoder_forward<'a>(&'a self, tape: &Tape<'a>, tokens: &[u32], task: &str) -> Result<Var> {
        let ctx = self.context(tape, task)?;
        self.encode(tape, &ctx, tokens)
    }

    /// Head output for a sequence under a resolved task context.
    pub fn output<'a>(&'a self, tape: &Tape<'a>, ctx: &TaskContext, tokens: &[u32]) -> Result<Var> {
        let task = ctx
            .task()
            .ok_or_else(|| ModelError::Config("decoder heads need a task context".into()))?;
        let enc = self.encode(tape, ctx, tokens)?;
        self.head(task)?.forward(tape, &self.store, enc, task)
    }

    /// Read-only predictions for a batch of sequences of one task.
    pub fn predict_many(&self, task: &str, inputs: &[&[u32]]) -> Result<Vec<Prediction>> {
        let tape = Tape::inference();
        let ctx = self.context(&tape, task)?;
        let kind = self.head(task)?.kind();
        inputs
            .iter()
            .map(|tokens| {
                let out = self.output(&tape, &ctx, tokens)?;
                let mut values = tape.values(out);
                Ok(match kind {
                    TaskKind::Classification { .. } => {
                        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in values.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        values.iter_mut().for_each(|v| *v /= sum);
                        Prediction::Probs(values)
                    }
                    TaskKind::Regression { min, max } => Prediction::Value(min + values[0] * (max - min)),
                })
            })
            .collect()
    }

    /// Per-example loss: cross-entropy for classification, squared error on
    /// the target rescaled to `[0, 1]` for regression.
    pub fn loss<'a>(&'a self, tape: &Tape<'a>, ctx: &TaskContext, tokens: &[u32], target: Target) -> Result<Var> {
        let out = self.output(tape, ctx, tokens)?;
        let task = ctx.task().unwrap_or_default();
        let kind = self.head(task)?.kind();
        Ok(match (kind, target) {
            (TaskKind::Classification { .. }, Target::Class(c)) => tape.cross_entropy(out, c)?,
            (TaskKind::Regression { min, max }, Target::Value(v)) => {
                tape.squared_error(out, (v - min) / (max - min))?
            }
            (kind, target) => {
                return Err(ModelError::Config(format!(
                    "target {target:?} does not fit a {kind:?} task"
                )))
            }
        })
    }

    /// Mean loss over examples of one task.
    pub fn batch_loss<'a>(&'a self, tape: &Tape<'a>, task: &str, batch: &[(&[u32], Target)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let ctx = self.context(tape, task)?;
        let losses = batch
            .iter()
            .map(|(tokens, target)| self.loss(tape, &ctx, tokens, *target))
            .collect::<Result<Vec<_>>>()?;
        let total = tape.add_all(&losses)?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }

    pub fn predict(&self, task: &str, tokens: &[u32]) -> Result<Prediction> {
        Ok(self.predict_many(task, &[tokens])?.remove(0))
    }

    /// Per-example mean over non-padding positions of the first-layer input.
    pub fn first_layer_inputs(&self, task: &str, inputs: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::inference();
        let ctx = self.context(&tape, task)?;
        let d = self.config.d_model;
        inputs
            .iter()
            .map(|tokens| {
                let ids = self.fit_tokens(tokens)?;
                let x = tape.values(self.embed(&tape, &ctx, tokens)?);
                let mut pooled = vec![0.0; d];
                let mut count = 0usize;
                for (pos, &id) in ids.iter().enumerate() {
                    if id != PAD_ID as usize {
                        count += 1;
                        for j in 0..d {
                            pooled[j] += x[pos * d + j];
                        }
                    }
                }
                pooled.iter_mut().for_each(|v| *v /= count.max(1) as f64);
                Ok(pooled)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
