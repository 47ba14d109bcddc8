//! Experiment driver: configuration, data, training, evaluation and
//! checkpoints.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod synthetic;
pub mod train;
pub mod tsv;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::data::{Example, TaskData};
use crate::model::{CaMtlModel, ModelError, Prediction, Target, TaskKind};
use crate::sampler::SamplerError;
use crate::tensor::TensorError;

pub use config::{ExperimentConfig, LossKind, OptimizerConfig, SyntheticSource, TaskSource, TaskSpec};
pub use metrics::{MetricsLine, MetricsRecord};
pub use train::{train, train_with, RunOutput};

/// Hash buckets reserved for unknown words when ingesting TSV files.
pub const TSV_HASH_BUCKETS: usize = 64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{origin}:{line}: {reason}")]
    Tsv { origin: String, line: usize, reason: String },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(
        "task `{task}` is not registered in this model; register it with `CaMtlModel::add_task` \
         (copying a related task's embedding row) and fine-tune before evaluating it"
    )]
    UnknownTask { task: String },
    #[error("non-finite loss at step {step}{}", dump.as_ref().map(|p| format!("; batch written to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: usize, dump: Option<PathBuf> },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Materializes every task's splits. TSV tasks share one vocabulary, built
/// from their training files in task order.
pub fn load_tasks(config: &ExperimentConfig) -> Result<Vec<TaskData>> {
    let m = &config.model;
    let mut vocab = None;
    let mut out = Vec::with_capacity(config.tasks.len());
    for spec in &config.tasks {
        let (train, dev, test) = match &spec.source {
            TaskSource::Synthetic(s) => {
                let splits = synthetic::generate(s, spec.kind, m.seq_len, m.vocab_size)?;
                (splits.train, splits.dev, splits.test)
            }
            TaskSource::Tsv { train, dev, test } => {
                let v = match &mut vocab {
                    Some(v) => v,
                    None => vocab.insert(tsv::Vocabulary::new(
                        m.vocab_size,
                        TSV_HASH_BUCKETS.min(m.vocab_size.saturating_sub(2)),
                        config.seed,
                    )?),
                };
                let tr = tsv::ingest_tsv(train, spec.kind, m.seq_len, v)?;
                let dv = tsv::ingest_tsv(dev, spec.kind, m.seq_len, v)?;
                let te = match test {
                    Some(p) => tsv::ingest_tsv(p, spec.kind, m.seq_len, v)?,
                    None => Vec::new(),
                };
                (tr, dv, te)
            }
        };
        out.push(TaskData::new(spec.name.clone(), spec.kind, train, dev, test));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

fn split_of(task: &TaskData, split: Split) -> &[Example] {
    match split {
        Split::Train => &task.train,
        Split::Dev => &task.dev,
        Split::Test => &task.test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub examples: usize,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub pearson: Option<f64>,
    /// Accuracy, or Pearson correlation for regression, in percent.
    pub score: f64,
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Inference-mode pass over one split of every task.
/// Tasks are spread over up to `CAMTL_THREADS` workers; results do not depend
/// on the worker count.
pub fn evaluate(model: &CaMtlModel, tasks: &[TaskData], split: Split) -> Result<Vec<TaskMetrics>> {
    let workers = thread_cap().min(tasks.len());
    if workers <= 1 {
        return tasks.iter().map(|t| evaluate_task(model, t, split)).collect();
    }
    let chunk = tasks.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|t| evaluate_task(model, t, split)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

pub fn evaluate_task(model: &CaMtlModel, task: &TaskData, split: Split) -> Result<TaskMetrics> {
    if model.tasks().index(&task.name).is_err() {
        return Err(HarnessError::UnknownTask { task: task.name.clone() });
    }
    let examples = split_of(task, split);
    let inputs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let preds = model.predict_many(&task.name, &inputs)?;
    let mut metrics = TaskMetrics {
        task: task.name.clone(),
        examples: examples.len(),
        accuracy: None,
        mse: None,
        pearson: None,
        score: 0.0,
    };
    if examples.is_empty() {
        return Ok(metrics);
    }
    match task.kind {
        TaskKind::Classification { .. } => {
            let correct = examples
                .iter()
                .zip(&preds)
                .filter(|(e, p)| match (e.target, p) {
                    (Target::Class(c), Prediction::Probs(probs)) => argmax(probs) == c,
                    _ => false,
                })
                .count();
            let acc = correct as f64 / examples.len() as f64;
            metrics.accuracy = Some(acc);
            metrics.score = 100.0 * acc;
        }
        TaskKind::Regression { .. } => {
            let mut ys = Vec::with_capacity(examples.len());
            let mut ps = Vec::with_capacity(examples.len());
            for (e, p) in examples.iter().zip(&preds) {
                if let (Target::Value(y), Prediction::Value(v)) = (e.target, p) {
                    ys.push(y);
                    ps.push(*v);
                }
            }
            let mse = ys.iter().zip(&ps).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / ys.len() as f64;
            let r = pearson(&ps, &ys);
            metrics.mse = Some(mse);
            metrics.pearson = Some(r);
            metrics.score = 100.0 * r;
        }
    }
    Ok(metrics)
}

/// Pairwise similarity of the tasks' first-layer input covariances, each
/// estimated from one split.
pub fn task_covsim(
    model: &CaMtlModel,
    tasks: &[TaskData],
    split: Split,
    rule: analysis::TruncationRule,
    form: analysis::CovSimForm,
) -> Result<analysis::CovSimReport> {
    let mut samples = Vec::with_capacity(tasks.len());
    for t in tasks {
        if model.tasks().index(&t.name).is_err() {
            return Err(HarnessError::UnknownTask { task: t.name.clone() });
        }
        let inputs: Vec<&[u32]> = split_of(t, split).iter().map(|e| e.tokens.as_slice()).collect();
        let rows = model.first_layer_inputs(&t.name, &inputs)?;
        samples.push((t.name.clone(), analysis::Matrix::from_rows(&rows)?));
    }
    Ok(analysis::covsim_report(&samples, rule, form)?)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Dispersion of task scores, or `None` with fewer than two tasks.
pub fn score_sigma(metrics: &[TaskMetrics]) -> Option<f64> {
    let scores: Vec<f64> = metrics.iter().map(|m| m.score).collect();
    analysis::task_sigma(&scores).ok()
}

/// Worker cap from `CAMTL_THREADS`; 1 when unset or invalid.
pub fn thread_cap() -> usize {
    std::env::var("CAMTL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
