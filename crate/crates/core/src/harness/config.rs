use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::synthetic::Generator;
use super::{HarnessError, Result};
use crate::model::{ModelConfig, TaskKind};
use crate::sampler::SamplerConfig;

/// Loss a task is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    MeanSquaredError,
}

impl LossKind {
    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Classification { .. } => LossKind::CrossEntropy,
            TaskKind::Regression { .. } => LossKind::MeanSquaredError,
        }
    }
}

fn default_dev_size() -> usize {
    200
}

fn default_noise() -> f64 {
    0.0
}

fn default_motif_len() -> usize {
    2
}

/// Knobs shared by every synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub generator: Generator,
    pub size: usize,
    #[serde(default = "default_dev_size")]
    pub dev_size: usize,
    #[serde(default)]
    pub test_size: usize,
    pub seed: u64,
    /// Content tokens the generator may use: ids `2 .. 2 + vocab`. Defaults to
    /// every non-special id of the model vocabulary.
    #[serde(default)]
    pub vocab: Option<usize>,
    #[serde(default = "default_motif_len")]
    pub motif_len: usize,
    /// Probability that a label is replaced by a uniformly random one.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Shortest content length; the longest is `seq_len - 1`.
    #[serde(default)]
    pub min_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(SyntheticSource),
    Tsv {
        train: PathBuf,
        dev: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub source: TaskSource,
    #[serde(default)]
    pub loss: Option<LossKind>,
}

impl TaskSpec {
    pub fn loss(&self) -> LossKind {
        self.loss.unwrap_or_else(|| LossKind::for_kind(self.kind))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Linear,
    Constant,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_warmup() -> f64 {
    0.1
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Share of the run spent ramping the learning rate up from zero.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub decay: Decay,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: default_lr(),
            warmup_fraction: default_warmup(),
            decay: Decay::Linear,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

fn default_eval_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Extra checkpoints every this many steps; the final one is always written.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Emit one trace record per training step into the metrics stream.
    #[serde(default)]
    pub policy_trace: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn task_kinds(&self) -> Vec<(String, TaskKind)> {
        self.tasks.iter().map(|t| (t.name.clone(), t.kind)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model.resolve()?;
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task name `{}`", t.name));
            }
            t.kind.validate().map_err(HarnessError::Config)?;
            if t.loss() != LossKind::for_kind(t.kind) {
                return bad(format!("task `{}`: loss {:?} does not fit {:?}", t.name, t.loss(), t.kind));
            }
            if let TaskSource::Synthetic(s) = &t.source {
                if s.size < self.sampler.batch_size {
                    return bad(format!(
                        "task `{}`: {} examples is fewer than the batch size {}",
                        t.name, s.size, self.sampler.batch_size
                    ));
                }
                if !(0.0..=1.0).contains(&s.noise) {
                    return bad(format!("task `{}`: noise must lie in [0, 1]", t.name));
                }
            }
        }
        if self.sampler.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        let o = &self.optimizer;
        if !(0.0..=1.0).contains(&o.warmup_fraction) {
            return bad("warmup fraction must lie in [0, 1]".into());
        }
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        Ok(())
    }
}
