//! Task-conditioned alignment between the embedding layer and the encoder.

use super::Result;
use crate::conditioning::{Arity, FilmGenerator, ModulatedWeight};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// `x ↦ x · R̂(z)` with `R̂(z) = R ⊙ γ(z) + β(z)` applied row-wise. `R`
/// starts as the identity, so alignment is a no-op at initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalAlignmentSite {
    weight: ModulatedWeight,
}

impl ConditionalAlignmentSite {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, embed_dim: usize) -> Result<Self> {
        let r = store.add(
            format!("{prefix}.R"),
            Tensor::identity(dim).with_requires_grad(true),
        )?;
        let generator = FilmGenerator::identity(store, prefix, embed_dim, dim)?;
        Ok(ConditionalAlignmentSite {
            weight: ModulatedWeight::new(store, r, generator, Arity::PerRow)?,
        })
    }

    pub fn weight(&self) -> &ModulatedWeight {
        &self.weight
    }

    /// `R̂(z)`.
    pub fn matrix<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<Var> {
        Ok(self.weight.modulate(tape, store, z)?)
    }

    pub fn forward<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, x: Var, z: Var) -> Result<Var> {
        let r = self.matrix(tape, store, z)?;
        Ok(tape.matmul(x, r)?)
    }
}
