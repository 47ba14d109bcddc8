//! The training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::ExperimentConfig;
use super::metrics::{self, MetricsLine, MetricsRecord};
use super::optim::Optimizer;
use super::{checkpoint, evaluate, load_tasks, score_sigma, HarnessError, Result, Split};
use crate::data::TaskData;
use crate::model::{CaMtlModel, Target};
use crate::sampler::{Sampler, Selection, StepTrace};
use crate::tensor::{Gradients, Tape};

/// Loss and gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Sum over tasks of each task's mean example loss.
    pub loss: f64,
    /// Mean loss of every task present in the batch, in task order.
    pub task_losses: Vec<(usize, f64)>,
    pub grads: Gradients,
}

/// Forward and backward pass over a selected batch. Every sampling policy
/// funnels through here, so they differ only in which items they pick.
pub fn step_gradients(model: &CaMtlModel, tasks: &[TaskData], items: &[Selection]) -> Result<StepResult> {
    let mut groups: BTreeMap<usize, Vec<(&[u32], Target)>> = BTreeMap::new();
    for s in items {
        let e = &tasks[s.task].train[s.example];
        groups.entry(s.task).or_default().push((e.tokens.as_slice(), e.target));
    }
    let tape = Tape::new();
    let mut vars = Vec::with_capacity(groups.len());
    for (&t, batch) in &groups {
        vars.push((t, model.batch_loss(&tape, &tasks[t].name, batch)?));
    }
    let total = tape.add_all(&vars.iter().map(|(_, v)| *v).collect::<Vec<_>>())?;
    let loss = tape.scalar(total)?;
    let task_losses = vars
        .iter()
        .map(|&(t, v)| Ok((t, tape.scalar(v)?)))
        .collect::<Result<Vec<_>>>()?;
    let grads = if loss.is_finite() { tape.backward(total)? } else { Gradients::default() };
    Ok(StepResult { loss, task_losses, grads })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub model: CaMtlModel,
    pub tasks: Vec<TaskData>,
    pub records: Vec<MetricsRecord>,
    /// The JSONL metrics stream, one entry per line.
    pub lines: Vec<String>,
    /// Batch loss per step.
    pub losses: Vec<f64>,
    /// Examples used in updates, per task.
    pub selected: Vec<usize>,
    /// Examples drawn from the training sets, per task.
    pub drawn: Vec<usize>,
}

impl RunOutput {
    pub fn checkpoint(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.model, &self.config)
    }

    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("a run always records its final evaluation")
    }
}

/// Builds data and model from the config and trains.
pub fn train(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let tasks = load_tasks(config)?;
    let model = CaMtlModel::new(config.model.clone(), &config.task_kinds(), config.seed)?;
    train_with(config, tasks, model)
}

struct Sink {
    dir: Option<PathBuf>,
    metrics: Option<File>,
    timing: Option<File>,
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl Sink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Sink { dir: None, metrics: None, timing: None });
        };
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| io_err(&p, e))
        };
        Ok(Sink {
            dir: Some(dir.to_path_buf()),
            metrics: Some(create("metrics.jsonl")?),
            timing: Some(create("timing.jsonl")?),
        })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        if let (Some(f), Some(dir)) = (&mut self.metrics, &self.dir) {
            writeln!(f, "{line}").map_err(|e| io_err(&dir.join("metrics.jsonl"), e))?;
        }
        Ok(())
    }

    fn timing(&mut self, step: usize, seconds: f64) -> Result<()> {
        if let (Some(f), Some(dir)) = (&mut self.timing, &self.dir) {
            writeln!(f, "{}", serde_json::json!({ "step": step, "elapsed_secs": seconds }))
                .map_err(|e| io_err(&dir.join("timing.jsonl"), e))?;
        }
        Ok(())
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Per-interval accumulators between two evaluations.
#[derive(Default)]
struct Interval {
    loss_sum: f64,
    steps: usize,
    composition: Vec<usize>,
}

/// Trains `model` on `tasks`. The model must already hold an embedding row
/// and a head for every task.
pub fn train_with(config: &ExperimentConfig, tasks: Vec<TaskData>, mut model: CaMtlModel) -> Result<RunOutput> {
    for t in &tasks {
        if model.tasks().index(&t.name).is_err() {
            return Err(HarnessError::UnknownTask { task: t.name.clone() });
        }
    }
    let mut sampler = Sampler::new(config.sampler, &tasks, config.seed.wrapping_add(1))?;
    let mut optimizer = Optimizer::new(config.optimizer, config.steps);
    let mut sink = Sink::open(config.out_dir.as_deref())?;
    let started = Instant::now();

    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut interval = Interval {
        composition: vec![0; tasks.len()],
        ..Interval::default()
    };
    let mut last_trace: Option<StepTrace> = None;
    let mut degenerate_steps = 0;

    let record = |step: usize,
                      model: &CaMtlModel,
                      sampler: &Sampler,
                      interval: &mut Interval,
                      last_trace: &Option<StepTrace>,
                      degenerate_steps: usize,
                      sink: &mut Sink,
                      lines: &mut Vec<String>|
     -> Result<MetricsRecord> {
        let dev = evaluate(model, &tasks, Split::Dev)?;
        let updated = sampler.total_selected();
        let scored = sampler.total_drawn();
        let rec = MetricsRecord {
            step,
            learning_rate: optimizer_lr(config, step),
            train_loss: (interval.steps > 0).then(|| interval.loss_sum / interval.steps as f64),
            mean_score: dev.iter().map(|m| m.score).sum::<f64>() / dev.len() as f64,
            task_sigma: score_sigma(&dev),
            dev,
            composition: std::mem::replace(&mut interval.composition, vec![0; sampler.cursors().len()]),
            mean_entropy: last_trace
                .as_ref()
                .map(|t| t.mean_entropy.clone())
                .unwrap_or_else(|| vec![None; sampler.cursors().len()]),
            max_mean_entropy: last_trace.as_ref().and_then(|t| t.max_mean_entropy),
            degenerate_steps,
            updated_samples: updated,
            scored_samples: scored,
            data_used_pct: if scored == 0 { 100.0 } else { 100.0 * updated as f64 / scored as f64 },
        };
        interval.loss_sum = 0.0;
        interval.steps = 0;
        let line = MetricsLine::Eval(rec.clone()).to_json();
        sink.write_line(&line)?;
        sink.timing(step, started.elapsed().as_secs_f64())?;
        lines.push(line);
        Ok(rec)
    };

    records.push(record(0, &model, &sampler, &mut interval, &last_trace, 0, &mut sink, &mut lines)?);
    for step in 0..config.steps {
        let batch = sampler.next_batch(&model)?;
        let result = step_gradients(&model, &tasks, &batch.items)?;
        if !result.loss.is_finite() {
            let dump = dump_batch(&sink, step, &tasks, &batch.items, &result);
            return Err(HarnessError::NonFiniteLoss { step, dump });
        }
        model.store_mut().absorb(&result.grads)?;
        optimizer.step(model.store_mut());
        losses.push(result.loss);
        interval.loss_sum += result.loss;
        interval.steps += 1;
        for (c, n) in interval.composition.iter_mut().zip(&batch.trace.composition) {
            *c += n;
        }
        if batch.trace.degenerate {
            degenerate_steps += 1;
        }
        if config.policy_trace {
            let line = MetricsLine::Trace(batch.trace.clone()).to_json();
            sink.write_line(&line)?;
            lines.push(line);
        }
        if batch.trace.max_mean_entropy.is_some() {
            last_trace = Some(batch.trace);
        }
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let rec = record(done, &model, &sampler, &mut interval, &last_trace, degenerate_steps, &mut sink, &mut lines)?;
            records.push(rec);
        }
        if let (Some(every), Some(path)) = (config.checkpoint_every, sink.path(&format!("checkpoint-{done:06}.camt"))) {
            if every > 0 && done % every == 0 && done != config.steps {
                checkpoint::save(&path, &model, config)?;
            }
        }
    }
    if let Some(path) = sink.path("checkpoint.camt") {
        checkpoint::save(&path, &model, config)?;
    }
    if let Some(path) = sink.path("metrics.csv") {
        std::fs::write(&path, metrics::to_csv(&records)).map_err(|e| io_err(&path, e))?;
    }
    Ok(RunOutput {
        config: config.clone(),
        selected: sampler.selected().to_vec(),
        drawn: sampler.cursors().iter().map(|c| c.drawn()).collect(),
        model,
        tasks,
        records,
        lines,
        losses,
    })
}

/// Rate of the update that follows `step` completed updates.
fn optimizer_lr(config: &ExperimentConfig, step: usize) -> f64 {
    Optimizer::new(config.optimizer, config.steps).learning_rate(step.min(config.steps.saturating_sub(1)))
}

fn dump_batch(sink: &Sink, step: usize, tasks: &[TaskData], items: &[Selection], result: &StepResult) -> Option<PathBuf> {
    let path = sink.path(&format!("nonfinite-step{step:06}.json"))?;
    let batch: Vec<_> = items
        .iter()
        .map(|s| {
            let e = &tasks[s.task].train[s.example];
            serde_json::json!({
                "task": tasks[s.task].name,
                "example": s.example,
                "tokens": e.tokens,
                "target": e.target,
            })
        })
        .collect();
    let losses: Vec<_> = result
        .task_losses
        .iter()
        .map(|(t, l)| serde_json::json!({ "task": tasks[*t].name, "loss": l.to_string() }))
        .collect();
    let body = serde_json::json!({ "step": step, "loss": result.loss.to_string(), "task_losses": losses, "batch": batch });
    match std::fs::write(&path, serde_json::to_string_pretty(&body).ok()?) {
        Ok(()) => Some(path),
        Err(e) => {
            log::error!("could not write {}: {e}", path.display());
            None
        }
    }
}
