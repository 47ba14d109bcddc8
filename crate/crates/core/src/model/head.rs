use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::init::{xavier, ModelRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Output type of a task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    /// Bounded scalar target in `[min, max]`.
    Regression { min: f64, max: f64 },
}

impl TaskKind {
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression { .. } => 1,
        }
    }

    pub fn validate(self) -> std::result::Result<(), String> {
        match self {
            TaskKind::Classification { classes } if classes < 2 => {
                Err(format!("classification needs at least 2 classes, got {classes}"))
            }
            TaskKind::Regression { min, max } if !(min < max) => {
                Err(format!("regression range [{min}, {max}] is empty"))
            }
            _ => Ok(()),
        }
    }
}

/// Affine map from the pooled first-position vector to the task output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    task: String,
    kind: TaskKind,
    weight: ParamId,
    bias: ParamId,
}

impl DecoderHead {
    pub fn new(store: &mut ParamStore, task: &str, kind: TaskKind, dim: usize, rng: &mut ModelRng) -> Result<Self> {
        kind.validate().map_err(ModelError::Config)?;
        let out = kind.output_dim();
        let weight = store.add(
            format!("heads.{task}.weight"),
            xavier(dim, out, rng).with_requires_grad(true),
        )?;
        let bias = store.add(
            format!("heads.{task}.bias"),
            Tensor::zeros(&[out]).with_requires_grad(true),
        )?;
        Ok(DecoderHead {
            task: task.to_string(),
            kind,
            weight,
            bias,
        })
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.get(self.weight).numel() + store.get(self.bias).numel()
    }

    /// Logits (classification) or a one-element prediction (regression).
    pub fn forward<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, enc: Var, task: &str) -> Result<Var> {
        if task != self.task {
            return Err(ModelError::HeadMismatch {
                head: self.task.clone(),
                task: task.to_string(),
            });
        }
        let pooled = tape.gather_rows(enc, &[0])?;
        let out = tape.matmul(pooled, tape.param(store, self.weight))?;
        let out = tape.reshape(out, &[self.kind.output_dim()])?;
        Ok(tape.add(out, tape.param(store, self.bias))?)
    }
}
