//! Layer normalization, plain and task-conditioned.

use super::Result;
use crate::conditioning::FilmGenerator;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-12;

/// Resolved affine parameters of one normalization for the current task.
#[derive(Debug, Clone, Copy)]
pub struct NormAffine {
    pub scale: Var,
    pub shift: Var,
}

/// `(a - μ) / sqrt(σ² + ε)` per row, then `⊙ scale + shift`.
pub fn layer_norm(tape: &Tape<'_>, a: Var, affine: NormAffine) -> Result<Var> {
    let (mu, var) = tape.layer_stats(a);
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.add_col(a, neg_mu)?;
    let sigma = tape.sqrt(tape.add_scalar(var, LN_EPS));
    let normalized = tape.mul_col(centered, tape.recip(sigma))?;
    let scaled = tape.mul_row(normalized, affine.scale)?;
    Ok(tape.add_row(scaled, affine.shift)?)
}

/// Inherited affine weights `γ′`, `β′`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, trainable: bool) -> Result<Self> {
        let gamma = store.add(
            format!("{prefix}.gamma"),
            Tensor::full(&[dim], 1.0).with_requires_grad(trainable),
        )?;
        let beta = store.add(
            format!("{prefix}.beta"),
            Tensor::zeros(&[dim]).with_requires_grad(trainable),
        )?;
        Ok(LayerNormParams { gamma, beta })
    }

    pub fn affine<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore) -> NormAffine {
        NormAffine {
            scale: tape.param(store, self.gamma),
            shift: tape.param(store, self.beta),
        }
    }
}

/// Conditional layer normalization.
///
/// The output is `norm(a) ⊙ (γ′ ⊙ γ(z)) + (β′ + β(z))`. With an identity
/// generator this is exactly the inherited layer norm, so the shift term is
/// the pretrained bias `β′` corrected by the task-dependent `β(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLayerNormSite {
    inherited: LayerNormParams,
    generator: FilmGenerator,
}

impl ConditionalLayerNormSite {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        embed_dim: usize,
        inherited_trainable: bool,
    ) -> Result<Self> {
        let inherited = LayerNormParams::new(store, prefix, dim, inherited_trainable)?;
        let generator = FilmGenerator::identity(store, prefix, embed_dim, dim)?;
        Ok(ConditionalLayerNormSite {
            inherited,
            generator,
        })
    }

    pub fn inherited(&self) -> &LayerNormParams {
        &self.inherited
    }

    pub fn generator(&self) -> &FilmGenerator {
        &self.generator
    }

    /// `γ̂(z) = γ′ ⊙ γ(z)` and shift `β′ + β(z)`.
    pub fn affine<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<NormAffine> {
        let (gamma, beta) = self.generator.generate(tape, store, z)?;
        let base = self.inherited.affine(tape, store);
        Ok(NormAffine {
            scale: tape.mul(base.scale, gamma)?,
            shift: tape.add(base.shift, beta)?,
        })
    }

    pub fn forward<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, a: Var, z: Var) -> Result<Var> {
        let affine = self.affine(tape, store, z)?;
        layer_norm(tape, a, affine)
    }
}

/// Either kind of normalization site inside an encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NormSite {
    Plain(LayerNormParams),
    Conditional(ConditionalLayerNormSite),
}

impl NormSite {
    pub fn inherited(&self) -> &LayerNormParams {
        match self {
            NormSite::Plain(p) => p,
            NormSite::Conditional(c) => c.inherited(),
        }
    }

    pub fn affine<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<NormAffine> {
        match self {
            NormSite::Plain(p) => Ok(p.affine(tape, store)),
            NormSite::Conditional(c) => c.affine(tape, store, z),
        }
    }
}
