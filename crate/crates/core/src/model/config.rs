use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Block-diagonal conditional bias `M(z) = ⊕ A'_n(z)`.
    BlockDiagonal,
    /// A single conditional `L×L` bias.
    FullBlock,
    /// Plain attention.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckVariant {
    /// Residual conditional bottleneck (with CLN) on the topmost layers.
    BaseTop,
    /// Conditional bottleneck skip path alongside every layer.
    LargeSkip,
    None,
}

fn default_true() -> bool {
    true
}

/// Architecture of the encoder. Optional fields fall back to the defaults
/// documented on [`ModelConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default)]
    pub frozen_layers: Option<Vec<usize>>,
    pub attention_variant: AttentionVariant,
    pub bottleneck_variant: BottleneckVariant,
    #[serde(default = "default_true")]
    pub conditional_alignment: bool,
    #[serde(default = "default_true")]
    pub conditional_layer_norm: bool,
    #[serde(default)]
    pub bottleneck_width: Option<usize>,
    #[serde(default)]
    pub ff_dim: Option<usize>,
    /// Keep the inherited layer-norm affine weights fixed inside CLN sites.
    #[serde(default)]
    pub freeze_ln_affine: bool,
}

impl ModelConfig {
    /// All conditional modules enabled, block-diagonal attention and the
    /// top-layer bottleneck.
    pub fn camtl(seq_len: usize, d_model: usize, n_layers: usize, n_heads: usize, vocab_size: usize) -> Self {
        ModelConfig {
            seq_len,
            d_model,
            n_layers,
            n_heads,
            vocab_size,
            blocks: None,
            frozen_layers: None,
            attention_variant: AttentionVariant::BlockDiagonal,
            bottleneck_variant: BottleneckVariant::BaseTop,
            conditional_alignment: true,
            conditional_layer_norm: true,
            bottleneck_width: None,
            ff_dim: None,
            freeze_ln_affine: false,
        }
    }

    /// The same encoder with every conditional module switched off.
    pub fn without_conditioning(&self) -> Self {
        ModelConfig {
            attention_variant: AttentionVariant::None,
            bottleneck_variant: BottleneckVariant::None,
            conditional_alignment: false,
            conditional_layer_norm: false,
            ..self.clone()
        }
    }

    /// Validates the configuration and fills in defaults:
    ///
    /// * `blocks` = `d_model / seq_len` when that divides evenly, and must
    ///   otherwise be given whenever conditional attention is enabled;
    /// * `frozen_layers` = the bottom half, `0 .. n_layers/2`;
    /// * `bottleneck_width` = `d_model / 4`; `ff_dim` = `4 · d_model`;
    /// * the top-layer bottleneck sits on the topmost 2 layers when
    ///   `n_layers <= 4` and on the topmost quarter otherwise.
    pub fn resolve(&self) -> Result<ResolvedConfig, ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.seq_len == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("seq_len, d_model, n_layers and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must leave room for the padding and CLS ids".into());
        }
        let blocks = match (self.blocks, self.attention_variant) {
            (Some(n), _) => n,
            (None, AttentionVariant::None) => 1,
            (None, _) if self.d_model.is_multiple_of(self.seq_len) => self.d_model / self.seq_len,
            (None, _) => {
                return bad(format!(
                    "d_model {} is not a multiple of seq_len {}; set `blocks` explicitly",
                    self.d_model, self.seq_len
                ))
            }
        };
        if blocks == 0 || !self.seq_len.is_multiple_of(blocks) {
            return bad(format!(
                "block count {blocks} must divide the sequence length {}",
                self.seq_len
            ));
        }
        let frozen: BTreeSet<usize> = match &self.frozen_layers {
            Some(v) => v.iter().copied().collect(),
            None => (0..self.n_layers / 2).collect(),
        };
        if let Some(&bad_layer) = frozen.iter().find(|&&l| l >= self.n_layers) {
            return bad(format!("frozen layer {bad_layer} does not exist"));
        }
        let bottleneck_width = self.bottleneck_width.unwrap_or((self.d_model / 4).max(1));
        if bottleneck_width == 0 {
            return bad("bottleneck_width must be positive".into());
        }
        let top = if self.n_layers <= 4 {
            2.min(self.n_layers)
        } else {
            self.n_layers.div_ceil(4)
        };
        let bottleneck_layers = match self.bottleneck_variant {
            BottleneckVariant::BaseTop => (self.n_layers - top..self.n_layers).collect(),
            _ => BTreeSet::new(),
        };
        Ok(ResolvedConfig {
            blocks,
            block_size: self.seq_len / blocks,
            frozen_layers: frozen,
            bottleneck_width,
            ff_dim: self.ff_dim.unwrap_or(4 * self.d_model),
            head_dim: self.d_model / self.n_heads,
            bottleneck_layers,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub blocks: usize,
    pub block_size: usize,
    pub frozen_layers: BTreeSet<usize>,
    pub bottleneck_width: usize,
    pub ff_dim: usize,
    pub head_dim: usize,
    pub bottleneck_layers: BTreeSet<usize>,
}
