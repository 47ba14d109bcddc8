//! Metrics stream records and their serialized forms.

use serde::{Deserialize, Serialize};

use super::TaskMetrics;
use crate::sampler::StepTrace;

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Optimizer updates completed before this evaluation.
    pub step: usize,
    pub learning_rate: f64,
    /// Mean batch loss since the previous record.
    pub train_loss: Option<f64>,
    pub dev: Vec<TaskMetrics>,
    pub mean_score: f64,
    pub task_sigma: Option<f64>,
    /// Examples selected per task since the previous record.
    pub composition: Vec<usize>,
    /// Per-task mean entropy at the most recent uncertainty step.
    pub mean_entropy: Vec<Option<f64>>,
    pub max_mean_entropy: Option<f64>,
    pub degenerate_steps: usize,
    /// Examples used in updates so far.
    pub updated_samples: usize,
    /// Examples drawn from the training sets so far, used or not.
    pub scored_samples: usize,
    /// `updated_samples` as a percentage of `scored_samples`.
    pub data_used_pct: f64,
}

/// A line of the JSONL metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsLine {
    Eval(MetricsRecord),
    Trace(StepTrace),
}

impl MetricsLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Summary table with one row per evaluation and one score column per task.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step,learning_rate,train_loss,mean_score,task_sigma,data_used_pct");
    if let Some(first) = records.first() {
        for m in &first.dev {
            out.push(',');
            out.push_str(&m.task);
        }
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.step,
            r.learning_rate,
            opt(r.train_loss),
            r.mean_score,
            opt(r.task_sigma),
            r.data_used_pct
        ));
        for m in &r.dev {
            out.push_str(&format!(",{}", m.score));
        }
        out.push('\n');
    }
    out
}
