//! Scaled dot-product attention with an additive task-conditioned bias.

use super::{config::AttentionVariant, ModelError, Result};
use crate::conditioning::{apply_modulation, Arity, FilmGenerator};
use crate::init::{uniform, ModelRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Scale of the random vectors that make up each base block.
pub const BLOCK_INIT_SCALE: f64 = 0.01;

/// Additive key mask value for padding positions.
pub const PAD_MASK: f64 = -1e9;

/// Trainable base blocks `A_n` plus one generator shared by all of them.
///
/// For the block-diagonal variant there are `N` blocks of side `L/N` and the
/// generator emits `(L/N)²` values; the full-block variant has one `L×L` block
/// and a generator of output dimension `L²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalAttentionSite {
    variant: AttentionVariant,
    blocks: Vec<ParamId>,
    generator: FilmGenerator,
    seq_len: usize,
    block_size: usize,
}

impl ConditionalAttentionSite {
    /// The generator starts with `γ = 0, β = 0`, so `M(z)` is exactly zero at
    /// initialization even though the base blocks are random.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        variant: AttentionVariant,
        seq_len: usize,
        blocks: usize,
        embed_dim: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        let (count, side) = match variant {
            AttentionVariant::BlockDiagonal => (blocks, seq_len / blocks),
            AttentionVariant::FullBlock => (1, seq_len),
            AttentionVariant::None => {
                return Err(ModelError::Config("attention site requires a conditional variant".into()))
            }
        };
        if count * side != seq_len {
            return Err(ModelError::Config(format!(
                "block count {blocks} does not divide sequence length {seq_len}"
            )));
        }
        let mut ids = Vec::with_capacity(count);
        for n in 0..count {
            let t = uniform(&[side, side], BLOCK_INIT_SCALE, rng).with_requires_grad(true);
            ids.push(store.add(format!("{prefix}.block.{n}"), t)?);
        }
        let generator = FilmGenerator::zero_scale(store, prefix, embed_dim, side * side)?;
        Ok(ConditionalAttentionSite {
            variant,
            blocks: ids,
            generator,
            seq_len,
            block_size: side,
        })
    }

    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }

    pub fn blocks(&self) -> &[ParamId] {
        &self.blocks
    }

    pub fn generator(&self) -> &FilmGenerator {
        &self.generator
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn param_count(&self) -> usize {
        self.blocks.len() * self.block_size * self.block_size + self.generator.param_count()
    }

    /// Assembles `M(z) = ⊕_n (γ(z) ⊙ A_n + β(z))`, an `L×L` matrix.
    pub fn conditional_matrix<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<Var> {
        let (gamma, beta) = self.generator.generate(tape, store, z)?;
        let modulated = self
            .blocks
            .iter()
            .map(|&id| apply_modulation(tape, tape.param(store, id), gamma, beta, Arity::PerElement))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.direct_sum(&modulated)?)
    }

    /// Single-head conditional attention `softmax(QKᵀ/√d_h + M(z)) V`.
    pub fn attend<'a>(
        &self,
        tape: &Tape<'a>,
        store: &'a ParamStore,
        q: Var,
        k: Var,
        v: Var,
        z: Var,
    ) -> Result<Var> {
        let rows = tape.shape(q)[0];
        if rows != self.seq_len {
            return Err(ModelError::SequenceLength {
                expected: self.seq_len,
                found: rows,
            });
        }
        let m = self.conditional_matrix(tape, store, z)?;
        attention(tape, q, k, v, Some(m), None)
    }
}

/// `softmax(Q Kᵀ / √d_h + bias + key_mask) V` where `d_h` is the width of
/// `Q`. `bias` is `L×L`; `key_mask` is a length-`L` row added to every row of
/// scores.
pub fn attention(
    tape: &Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    key_mask: Option<Var>,
) -> Result<Var> {
    let d_h = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (d_h as f64).sqrt());
    if let Some(m) = bias {
        scores = tape.add(scores, m)?;
    }
    if let Some(mask) = key_mask {
        scores = tape.add_row(scores, mask)?;
    }
    let weights = tape.softmax_lastdim(scores);
    Ok(tape.matmul(weights, v)?)
}

/// Length-`L` additive mask: 0 for real tokens, [`PAD_MASK`] for padding.
/// `None` when nothing is padded.
pub fn key_mask(tape: &Tape<'_>, padded: &[bool]) -> Option<Var> {
    if !padded.iter().any(|&p| p) {
        return None;
    }
    let row = padded.iter().map(|&p| if p { PAD_MASK } else { 0.0 }).collect();
    Some(tape.constant(Tensor::vector(row)))
}
