//! Task embeddings and feature-wise linear modulation (FiLM) of weights.
//!
//! Every conditional module owns a [`FilmGenerator`] that maps the current
//! task embedding `z` to a scale `γ(z)` and shift `β(z)`, and applies them to a
//! shared base weight: `φ(W | z) = γ(z) ⊙ W + β(z)`. How `γ` and `β` broadcast
//! over `W` is fixed per site by its [`Arity`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::{uniform, ModelRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Half-width of the uniform distribution used for new task embeddings.
pub const TASK_EMBEDDING_INIT: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditioningError {
    #[error("unknown task `{name}`; registered tasks: {known:?}")]
    UnknownTask { name: String, known: Vec<String> },
    #[error("task `{0}` is already registered")]
    DuplicateTask(String),
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ConditioningError>;

/// How a generator's `p` outputs map onto the entries of a base weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    /// One factor per weight entry (`p = rows · cols`).
    PerElement,
    /// One factor per row (`p = rows`).
    PerRow,
    /// One factor per column (`p = cols`).
    PerColumn,
    /// A single factor for the whole matrix (`p = 1`).
    Scalar,
}

impl Arity {
    pub fn output_dim(self, shape: &[usize]) -> usize {
        let (r, c) = match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (shape.iter().product(), 1),
        };
        match self {
            Arity::PerElement => r * c,
            Arity::PerRow => r,
            Arity::PerColumn => c,
            Arity::Scalar => 1,
        }
    }
}

/// Learned affine maps `z ↦ (γ, β)`, both `ℝ^d → ℝ^p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmGenerator {
    gamma_weight: ParamId,
    gamma_bias: ParamId,
    beta_weight: ParamId,
    beta_bias: ParamId,
    input_dim: usize,
    output_dim: usize,
}

impl FilmGenerator {
    /// Zero weight matrices with the given biases, so `γ(z) = gamma_bias`
    /// and `β(z) = beta_bias` for every `z` until training moves them.
    pub fn with_biases(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        gamma_bias: Vec<f64>,
        beta_bias: Vec<f64>,
    ) -> Result<Self> {
        let p = gamma_bias.len();
        if beta_bias.len() != p {
            return Err(ConditioningError::DimensionMismatch {
                what: "film bias",
                expected: p,
                found: beta_bias.len(),
            });
        }
        let gamma_weight = store.add(
            format!("{prefix}.film.gamma.weight"),
            Tensor::zeros(&[input_dim, p]).with_requires_grad(true),
        )?;
        let gamma_bias = store.add(
            format!("{prefix}.film.gamma.bias"),
            Tensor::vector(gamma_bias).with_requires_grad(true),
        )?;
        let beta_weight = store.add(
            format!("{prefix}.film.beta.weight"),
            Tensor::zeros(&[input_dim, p]).with_requires_grad(true),
        )?;
        let beta_bias = store.add(
            format!("{prefix}.film.beta.bias"),
            Tensor::vector(beta_bias).with_requires_grad(true),
        )?;
        Ok(FilmGenerator {
            gamma_weight,
            gamma_bias,
            beta_weight,
            beta_bias,
            input_dim,
            output_dim: p,
        })
    }

    /// `γ(z) = 1`, `β(z) = 0` at initialization.
    pub fn identity(store: &mut ParamStore, prefix: &str, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::with_biases(store, prefix, input_dim, vec![1.0; output_dim], vec![0.0; output_dim])
    }

    /// `γ(z) = 0`, `β(z) = 0` at initialization: the modulated weight starts
    /// at exactly zero while the base stays a trainable, non-zero direction.
    pub fn zero_scale(store: &mut ParamStore, prefix: &str, input_dim: usize, output_dim: usize) -> Result<Self> {
        Self::with_biases(store, prefix, input_dim, vec![0.0; output_dim], vec![0.0; output_dim])
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.gamma_weight, self.gamma_bias, self.beta_weight, self.beta_bias]
    }

    pub fn param_count(&self) -> usize {
        2 * (self.input_dim * self.output_dim + self.output_dim)
    }

    /// Returns `(γ(z), β(z))`, each of length `p`.
    pub fn generate<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(z);
        if shape != [self.input_dim] {
            return Err(ConditioningError::DimensionMismatch {
                what: "film input",
                expected: self.input_dim,
                found: shape.iter().product(),
            });
        }
        let zr = tape.reshape(z, &[1, self.input_dim])?;
        let affine = |w: ParamId, b: ParamId| -> Result<Var> {
            let out = tape.matmul(zr, tape.param(store, w))?;
            let out = tape.reshape(out, &[self.output_dim])?;
            Ok(tape.add(out, tape.param(store, b))?)
        };
        Ok((affine(self.gamma_weight, self.gamma_bias)?, affine(self.beta_weight, self.beta_bias)?))
    }
}

/// Applies `γ ⊙ W + β` with the given arity. `gamma` and `beta` must have
/// `arity.output_dim(shape(W))` entries.
pub fn apply_modulation(tape: &Tape<'_>, base: Var, gamma: Var, beta: Var, arity: Arity) -> Result<Var> {
    let shape = tape.shape(base);
    let p = arity.output_dim(&shape);
    for v in [gamma, beta] {
        let found: usize = tape.shape(v).iter().product();
        if found != p {
            return Err(ConditioningError::DimensionMismatch {
                what: "modulation arity",
                expected: p,
                found,
            });
        }
    }
    let out = match arity {
        Arity::PerElement => {
            let g = tape.reshape(gamma, &shape)?;
            let b = tape.reshape(beta, &shape)?;
            let scaled = tape.mul(base, g)?;
            tape.add(scaled, b)?
        }
        Arity::PerRow => {
            let scaled = tape.mul_col(base, gamma)?;
            tape.add_col(scaled, beta)?
        }
        Arity::PerColumn => {
            let scaled = tape.mul_row(base, gamma)?;
            tape.add_row(scaled, beta)?
        }
        Arity::Scalar => {
            let scaled = tape.scale_by(base, gamma)?;
            tape.shift_by(scaled, beta)?
        }
    };
    Ok(out)
}

/// A shared base weight paired with the generator that conditions it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedWeight {
    base: ParamId,
    generator: FilmGenerator,
    arity: Arity,
}

impl ModulatedWeight {
    pub fn new(store: &ParamStore, base: ParamId, generator: FilmGenerator, arity: Arity) -> Result<Self> {
        let expected = arity.output_dim(store.get(base).shape());
        if generator.output_dim() != expected {
            return Err(ConditioningError::DimensionMismatch {
                what: "generator output for arity",
                expected,
                found: generator.output_dim(),
            });
        }
        Ok(ModulatedWeight {
            base,
            generator,
            arity,
        })
    }

    pub fn base(&self) -> ParamId {
        self.base
    }

    pub fn generator(&self) -> &FilmGenerator {
        &self.generator
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn trainable_base(&self, store: &ParamStore) -> bool {
        store.get(self.base).requires_grad()
    }

    pub fn modulate<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, z: Var) -> Result<Var> {
        let (gamma, beta) = self.generator.generate(tape, store, z)?;
        apply_modulation(tape, tape.param(store, self.base), gamma, beta, self.arity)
    }
}

/// How a newly registered task's embedding row is initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    CopyOf(String),
    Random,
    Zeros,
}

/// `T` learnable `d`-dimensional task embeddings, one row per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbeddingTable {
    param: ParamId,
    names: Vec<String>,
    dim: usize,
}

impl TaskEmbeddingTable {
    pub fn new(store: &mut ParamStore, names: &[String], dim: usize, rng: &mut ModelRng) -> Result<Self> {
        if names.is_empty() {
            return Err(TensorError::invalid("task table", "at least one task is required").into());
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(ConditioningError::DuplicateTask(n.clone()));
            }
        }
        let t = uniform(&[names.len(), dim], TASK_EMBEDDING_INIT, rng).with_requires_grad(true);
        let param = store.add("tasks.embedding", t)?;
        store.set_row_sparse(param, true);
        Ok(TaskEmbeddingTable {
            param,
            names: names.to_vec(),
            dim,
        })
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index(&self, task: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == task)
            .ok_or_else(|| ConditioningError::UnknownTask {
                name: task.to_string(),
                known: self.names.clone(),
            })
    }

    pub fn row(&self, store: &ParamStore, task: &str) -> Result<Vec<f64>> {
        let i = self.index(task)?;
        Ok(store.get(self.param).data()[i * self.dim..(i + 1) * self.dim].to_vec())
    }

    /// The task's learnable row as a `[d]` node on the tape.
    pub fn embed_task<'a>(&self, tape: &Tape<'a>, store: &'a ParamStore, task: &str) -> Result<Var> {
        let i = self.index(task)?;
        Ok(tape.row(tape.param(store, self.param), i)?)
    }

    /// Appends a row for `new_task`. Existing rows are left untouched.
    pub fn extend(
        &mut self,
        store: &mut ParamStore,
        new_task: &str,
        init: &EmbeddingInit,
        rng: &mut ModelRng,
    ) -> Result<()> {
        if self.names.iter().any(|n| n == new_task) {
            return Err(ConditioningError::DuplicateTask(new_task.to_string()));
        }
        let row = match init {
            EmbeddingInit::CopyOf(src) => self.row(store, src)?,
            EmbeddingInit::Random => (0..self.dim)
                .map(|_| rng.random_range(-TASK_EMBEDDING_INIT..=TASK_EMBEDDING_INIT))
                .collect(),
            EmbeddingInit::Zeros => vec![0.0; self.dim],
        };
        let mut data = store.get(self.param).data().to_vec();
        data.extend(row);
        let t = Tensor::new(vec![self.names.len() + 1, self.dim], data)?;
        store.replace(self.param, t);
        self.names.push(new_task.to_string());
        Ok(())
    }
}
