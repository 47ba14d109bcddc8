//! Conditional feed-forward bottleneck (down-projection, GELU, up-projection).

use super::config::BottleneckVariant;
use super::norm::{layer_norm, ConditionalLayerNormSite, NormAffine};
use super::{ModelError, Result};
use crate::conditioning::{Arity, FilmGenerator, ModulatedWeight};
use crate::init::{xavier, ModelRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Both projections are row-modulated shared weights. The up-projection
/// starts at zero so the branch contributes nothing at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalBottleneckSite {
    variant: BottleneckVariant,
    down: ModulatedWeight,
    down_bias: ParamId,
    up: ModulatedWeight,
    up_bias: ParamId,
    norm: Option<ConditionalLayerNormSite>,
}

/// Per-task resolved weights of a bottleneck site.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckWeights {
    down: Var,
    down_bias: Var,
    up: Var,
    up_bias: Var,
    norm: Option<NormAffine>,
}

impl ConditionalBottleneckSite {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        variant: BottleneckVariant,
        dim: usize,
        width: usize,
        embed_dim: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        if variant == BottleneckVariant::None {
            return Err(ModelError::Config("bottleneck site requires a variant".into()));
        }
        let down_base = store.add(
            format!("{prefix}.down.weight"),
            xavier(dim, width, rng).with_requires_grad(true),
        )?;
        let down_gen = FilmGenerator::identity(store, &format!("{prefix}.down"), embed_dim, dim)?;
        let down = ModulatedWeight::new(store, down_base, down_gen, Arity::PerRow)?;
        let down_bias = store.add(
            format!("{prefix}.down.bias"),
            Tensor::zeros(&[width]).with_requires_grad(true),
        )?;
        let up_base = store.add(
            format!("{prefix}.up.weight"),
            Tensor::zeros(&[width, dim]).with_requires_grad(true),
        )?;
        let up_gen = FilmGenerator::identity(store, &format!("{prefix}.up"), embed_dim, width)?;
        let up = ModulatedWeight::new(store, up_base, up_gen, Arity::PerRow)?;
        let up_bias = store.add(
            format!("{prefix}.up.bias"),
            Tensor::zeros(&[dim]).with_requires_grad(true),
        )?;
        let norm = match variant {
            BottleneckVariant::BaseTop => Some(ConditionalLayerNormSite::new(
                store,
                &format!("{prefix}.cln"),
                dim,
                embed_dim,
                true,
            )?),
            _ => None,
        };
        Ok(ConditionalBottleneckSite {
            variant,
            down,
            down_bias,
            up,
            up_bias,
            norm,
        })
    }

    pub fn variant(&self) -> BottleneckVariant {
        self.variant
    }

    pub fn down(&self) -> &ModulatedWeight {
        &self.down
    }

    pub fn up(&self) -> &ModulatedWeight {
        &self.up
    }

    pub fn biases(&self) -> (ParamId, ParamId) {
        (self.down_bias, self.up_bias)
    }

    pub fn norm(&self) -> Option<&ConditionalLayerNormSite> {
        self.norm.as_ref()
    }

    pub fn weights<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<BottleneckWeights> {
        Ok(BottleneckWeights {
            down: self.down.modulate(tape, store, z)?,
            down_bias: tape.param(store, self.down_bias),
            up: self.up.modulate(tape, store, z)?,
            up_bias: tape.param(store, self.up_bias),
            norm: match &self.norm {
                Some(n) => Some(n.affine(tape, store, z)?),
                None => None,
            },
        })
    }

    /// Top-layer residual form: `h + up(gelu(down(CLN(h))))`.
    pub fn forward<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, h: Var, z: Var) -> Result<Var> {
        if self.variant != BottleneckVariant::BaseTop {
            return Err(ModelError::VariantMismatch {
                expected: BottleneckVariant::BaseTop,
                found: self.variant,
            });
        }
        let w = self.weights(tape, store, z)?;
        residual(tape, h, &w)
    }

    /// Skip-path form: `s_j = up(gelu(down(h_j + s_{j-1})))`.
    pub fn skip<'a>(
        &self,
        tape: &Tape<'a>,
        store: &'a ParamStore,
        h: Var,
        previous: Option<Var>,
        z: Var,
    ) -> Result<Var> {
        if self.variant != BottleneckVariant::LargeSkip {
            return Err(ModelError::VariantMismatch {
                expected: BottleneckVariant::LargeSkip,
                found: self.variant,
            });
        }
        let w = self.weights(tape, store, z)?;
        skip_state(tape, h, previous, &w)
    }
}

pub(crate) fn branch(tape: &Tape<'_>, x: Var, w: &BottleneckWeights) -> Result<Var> {
    let x = match w.norm {
        Some(affine) => layer_norm(tape, x, affine)?,
        None => x,
    };
    let hidden = tape.matmul(x, w.down)?;
    let hidden = tape.gelu(tape.add_row(hidden, w.down_bias)?);
    let out = tape.matmul(hidden, w.up)?;
    Ok(tape.add_row(out, w.up_bias)?)
}

pub(crate) fn residual(tape: &Tape<'_>, h: Var, w: &BottleneckWeights) -> Result<Var> {
    let b = branch(tape, h, w)?;
    Ok(tape.add(h, b)?)
}

pub(crate) fn skip_state(tape: &Tape<'_>, h: Var, previous: Option<Var>, w: &BottleneckWeights) -> Result<Var> {
    let input = match previous {
        Some(s) => tape.add(h, s)?,
        None => h,
    };
    branch(tape, input, w)
}
