//! Batch selection across tasks.
//!
//! [`Policy::Uncertainty`] draws `b` candidates from every task, scores each
//! by its normalized prediction entropy and keeps the `b` most uncertain.
//! [`Policy::Random`] and [`Policy::TaskSize`] pick a task per batch slot,
//! uniformly or in proportion to dataset size.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Example, TaskData};
use crate::init::{rng_from_seed, ModelRng};
use crate::model::{CaMtlModel, ModelError, Prediction, TaskKind};

/// Allowed deviation of a probability vector's sum from one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Default slope of the sigmoid that turns a bounded regression output into a
/// two-bin distribution, in units of the (rescaled) output range. At the range
/// ends the minority bin keeps about 12% of the mass.
pub const REGRESSION_SHARPNESS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("entropy normalization needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("task `{0}` has no training examples")]
    EmptyTask(String),
    #[error("sampler needs at least one task and a positive batch size")]
    Empty,
    /// Every scored prediction was certain, so uncertainties are undefined.
    /// The pool carries the drawn candidates for a fallback selection.
    #[error("degenerate candidate pool: maximum mean entropy is zero")]
    Degenerate(Box<CandidatePool>),
    #[error("prediction for task `{task}` does not match its kind")]
    PredictionKind { task: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(SamplerError::InvalidDistribution("empty vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(SamplerError::InvalidDistribution(format!("entry {p} is not a probability")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(SamplerError::InvalidDistribution(format!("entries sum to {total}")));
    }
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    // Rounding can push a near-certain distribution a hair below zero.
    Ok(h.max(0.0))
}

/// Entropy of the uniform distribution over `classes`: `ln C`.
pub fn max_entropy_uniform(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(SamplerError::TooFewClasses(classes));
    }
    Ok((classes as f64).ln())
}

/// Two-bin pseudo-distribution `[P(low), P(high)]` of a bounded regression
/// output: a sigmoid centred on the middle of `[min, max]`. Outputs beyond the
/// range are clamped to it first, so a head that has not yet learned the
/// scale does not read as certain.
pub fn regression_distribution(value: f64, min: f64, max: f64, sharpness: f64) -> [f64; 2] {
    let u = ((value - min) / (max - min)).clamp(0.0, 1.0);
    let high = 1.0 / (1.0 + (-sharpness * (u - 0.5)).exp());
    [1.0 - high, high]
}

/// How regression tasks take part in uncertainty scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RegressionScoring {
    /// Score through [`regression_distribution`] as a two-class task.
    Binned { sharpness: f64 },
    /// Leave regression tasks out of the pool; their share of each batch is
    /// filled by uniform task sampling.
    Exclude,
}

impl Default for RegressionScoring {
    fn default() -> Self {
        RegressionScoring::Binned {
            sharpness: REGRESSION_SHARPNESS,
        }
    }
}

/// What the task-sampling baselines do when a task runs out of data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exhaustion {
    /// Reshuffle the task and keep drawing from it.
    ReloadImmediately,
    /// Skip the task until every task is exhausted, then reload all of them.
    #[default]
    WaitForEpoch,
}

/// Per-task pass over a training set in shuffled epochs.
#[derive(Debug, Clone)]
pub struct TaskCursor {
    task: String,
    kind: TaskKind,
    data: Dataset,
    order: Vec<usize>,
    position: usize,
    reloads: usize,
    drawn: usize,
    rng: ModelRng,
}

impl TaskCursor {
    pub fn new(task: impl Into<String>, kind: TaskKind, data: Dataset, seed: u64) -> Result<Self> {
        let task = task.into();
        if data.is_empty() {
            return Err(SamplerError::EmptyTask(task));
        }
        let mut rng = rng_from_seed(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(TaskCursor {
            task,
            kind,
            data,
            order,
            position: 0,
            reloads: 0,
            drawn: 0,
            rng,
        })
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.order.len() - self.position
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining() == 0
    }

    /// Draws taken in the current epoch.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn reload_count(&self) -> usize {
        self.reloads
    }

    /// Draws over the cursor's lifetime.
    pub fn drawn(&self) -> usize {
        self.drawn
    }

    pub fn example(&self, index: usize) -> &Example {
        &self.data[index]
    }

    /// Starts a freshly shuffled epoch.
    pub fn reload(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.position = 0;
        self.reloads += 1;
    }

    /// Next example index, reloading first when the epoch is used up.
    pub fn draw(&mut self) -> usize {
        if self.is_exhausted() {
            self.reload();
        }
        let i = self.order[self.position];
        self.position += 1;
        self.drawn += 1;
        i
    }
}

/// Read-only forward passes used for scoring.
pub trait Predictor {
    fn predict_many(&self, task: &str, inputs: &[&[u32]]) -> std::result::Result<Vec<Prediction>, ModelError>;
}

impl Predictor for CaMtlModel {
    fn predict_many(&self, task: &str, inputs: &[&[u32]]) -> std::result::Result<Vec<Prediction>, ModelError> {
        CaMtlModel::predict_many(self, task, inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position of the task among the sampler's cursors.
    pub task: usize,
    /// Order in which the candidate was drawn from its task.
    pub draw: usize,
    pub example: usize,
    pub entropy: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub batch_size: usize,
    /// Ordered by task, then draw.
    pub candidates: Vec<Candidate>,
    /// Mean entropy per task; `None` for tasks left out of scoring.
    pub mean_entropy: Vec<Option<f64>>,
    pub max_mean_entropy: f64,
}

/// Entropy and its uniform maximum for one prediction, or `None` when the
/// task is excluded from scoring.
pub fn prediction_entropy(pred: &Prediction, kind: TaskKind, scoring: RegressionScoring) -> Option<Result<(f64, f64)>> {
    match (pred, kind, scoring) {
        (_, TaskKind::Regression { .. }, RegressionScoring::Exclude) => None,
        (Prediction::Probs(p), TaskKind::Classification { classes }, _) => Some(
            shannon_entropy(p).and_then(|h| Ok((h, max_entropy_uniform(classes)?))),
        ),
        (Prediction::Value(v), TaskKind::Regression { min, max }, RegressionScoring::Binned { sharpness }) => {
            let p = regression_distribution(*v, min, max, sharpness);
            Some(shannon_entropy(&p).and_then(|h| Ok((h, max_entropy_uniform(2)?))))
        }
        _ => Some(Err(SamplerError::InvalidDistribution(format!(
            "prediction {pred:?} does not fit {kind:?}"
        )))),
    }
}

fn scored(kind: TaskKind, scoring: RegressionScoring) -> bool {
    !matches!((kind, scoring), (TaskKind::Regression { .. }, RegressionScoring::Exclude))
}

/// Draws `b` candidates from every scored task and computes
/// `U = H / (Ĥ · H′)`, where `Ĥ` is the largest per-task mean entropy and
/// `H′` the task's uniform entropy. Drawn candidates leave their cursor.
pub fn score_pool<P: Predictor + ?Sized>(
    model: &P,
    cursors: &mut [TaskCursor],
    b: usize,
    scoring: RegressionScoring,
) -> Result<CandidatePool> {
    if cursors.is_empty() || b == 0 {
        return Err(SamplerError::Empty);
    }
    let mut candidates = Vec::with_capacity(b * cursors.len());
    let mut normalizers = Vec::with_capacity(b * cursors.len());
    let mut mean_entropy = vec![None; cursors.len()];
    for (t, cursor) in cursors.iter_mut().enumerate() {
        if !scored(cursor.kind(), scoring) {
            continue;
        }
        let drawn: Vec<usize> = (0..b).map(|_| cursor.draw()).collect();
        let inputs: Vec<&[u32]> = drawn.iter().map(|&i| cursor.example(i).tokens.as_slice()).collect();
        let preds = model.predict_many(cursor.task(), &inputs)?;
        let mut sum = 0.0;
        for (draw, (example, pred)) in drawn.iter().zip(&preds).enumerate() {
            let (h, h_max) = prediction_entropy(pred, cursor.kind(), scoring)
                .ok_or_else(|| SamplerError::PredictionKind {
                    task: cursor.task().to_string(),
                })??;
            sum += h;
            normalizers.push(h_max);
            candidates.push(Candidate {
                task: t,
                draw,
                example: *example,
                entropy: h,
                uncertainty: 0.0,
            });
        }
        mean_entropy[t] = Some(sum / b as f64);
    }
    let max_mean_entropy = mean_entropy.iter().flatten().copied().fold(0.0, f64::max);
    let mut pool = CandidatePool {
        batch_size: b,
        candidates,
        mean_entropy,
        max_mean_entropy,
    };
    if pool.candidates.is_empty() {
        return Ok(pool);
    }
    if max_mean_entropy <= 0.0 {
        return Err(SamplerError::Degenerate(Box::new(pool)));
    }
    for (c, h_max) in pool.candidates.iter_mut().zip(normalizers) {
        c.uncertainty = c.entropy / (max_mean_entropy * h_max);
    }
    Ok(pool)
}

/// The `count` most uncertain candidates. Ties keep pool order (task, then
/// draw), so the result is fully deterministic.
pub fn select_top(pool: &CandidatePool, count: usize) -> Vec<Candidate> {
    let mut ranked = pool.candidates.clone();
    ranked.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty));
    ranked.truncate(count);
    ranked
}

pub fn select_top_b(pool: &CandidatePool) -> Vec<Candidate> {
    select_top(pool, pool.batch_size)
}

/// Fallback for a degenerate pool: each slot picks a task uniformly among
/// those with unused candidates and takes that task's next one.
pub fn select_random_from_pool(pool: &CandidatePool, count: usize, rng: &mut ModelRng) -> Vec<Candidate> {
    let tasks = pool.mean_entropy.len();
    let mut queues: Vec<std::collections::VecDeque<Candidate>> = vec![Default::default(); tasks];
    for c in &pool.candidates {
        queues[c.task].push_back(*c);
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let open: Vec<usize> = (0..tasks).filter(|&t| !queues[t].is_empty()).collect();
        if open.is_empty() {
            break;
        }
        let t = open[rng.random_range(0..open.len())];
        out.extend(queues[t].pop_front());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub task: usize,
    pub example: usize,
}

fn sample_weighted(
    cursors: &mut [TaskCursor],
    b: usize,
    rng: &mut ModelRng,
    exhaustion: Exhaustion,
    weight: impl Fn(&TaskCursor) -> f64,
) -> Vec<Selection> {
    let mut out = Vec::with_capacity(b);
    if cursors.is_empty() {
        return out;
    }
    for _ in 0..b {
        let mut eligible: Vec<usize> = match exhaustion {
            Exhaustion::ReloadImmediately => (0..cursors.len()).collect(),
            Exhaustion::WaitForEpoch => (0..cursors.len()).filter(|&t| !cursors[t].is_exhausted()).collect(),
        };
        if eligible.is_empty() {
            cursors.iter_mut().for_each(TaskCursor::reload);
            eligible = (0..cursors.len()).collect();
        }
        let weights: Vec<f64> = eligible.iter().map(|&t| weight(&cursors[t])).collect();
        let t = match WeightedIndex::new(&weights) {
            Ok(dist) => eligible[dist.sample(rng)],
            Err(_) => eligible[rng.random_range(0..eligible.len())],
        };
        let example = cursors[t].draw();
        out.push(Selection { task: t, example });
    }
    out
}

/// Each slot picks a task uniformly, then takes that task's next example.
pub fn sample_random(cursors: &mut [TaskCursor], b: usize, rng: &mut ModelRng, exhaustion: Exhaustion) -> Vec<Selection> {
    sample_weighted(cursors, b, rng, exhaustion, |_| 1.0)
}

/// Each slot picks a task with probability proportional to its dataset size.
pub fn sample_task_size(cursors: &mut [TaskCursor], b: usize, rng: &mut ModelRng, exhaustion: Exhaustion) -> Vec<Selection> {
    sample_weighted(cursors, b, rng, exhaustion, |c| c.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    #[serde(rename = "mt_uncertainty")]
    Uncertainty,
    Random,
    TaskSize,
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mt_uncertainty" | "mt-uncertainty" | "uncertainty" => Ok(Policy::Uncertainty),
            "random" => Ok(Policy::Random),
            "task_size" | "task-size" => Ok(Policy::TaskSize),
            other => Err(format!("unknown sampling policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub policy: Policy,
    pub batch_size: usize,
    #[serde(default)]
    pub regression: RegressionScoring,
    #[serde(default)]
    pub exhaustion: Exhaustion,
}

/// What one selection step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub policy: Policy,
    /// Selected examples per task.
    pub composition: Vec<usize>,
    pub mean_entropy: Vec<Option<f64>>,
    pub max_mean_entropy: Option<f64>,
    pub degenerate: bool,
    /// Examples drawn this step, selected or not.
    pub drawn: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<Selection>,
    pub trace: StepTrace,
}

/// Owns one cursor per task and produces training batches.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    cursors: Vec<TaskCursor>,
    rng: ModelRng,
    step: usize,
    selected: Vec<usize>,
}

impl Sampler {
    pub fn new(config: SamplerConfig, tasks: &[TaskData], seed: u64) -> Result<Self> {
        if tasks.is_empty() || config.batch_size == 0 {
            return Err(SamplerError::Empty);
        }
        let mut rng = rng_from_seed(seed);
        let cursors = tasks
            .iter()
            .map(|t| TaskCursor::new(t.name.clone(), t.kind, t.train.clone(), rng.random()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Sampler {
            config,
            selected: vec![0; cursors.len()],
            cursors,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn cursors(&self) -> &[TaskCursor] {
        &self.cursors
    }

    /// Selected examples per task so far.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn total_drawn(&self) -> usize {
        self.cursors.iter().map(TaskCursor::drawn).sum()
    }

    pub fn total_selected(&self) -> usize {
        self.selected.iter().sum()
    }

    pub fn next_batch<P: Predictor + ?Sized>(&mut self, model: &P) -> Result<Batch> {
        let b = self.config.batch_size;
        let drawn_before = self.total_drawn();
        let mut trace = StepTrace {
            step: self.step,
            policy: self.config.policy,
            composition: vec![0; self.cursors.len()],
            mean_entropy: vec![None; self.cursors.len()],
            max_mean_entropy: None,
            degenerate: false,
            drawn: 0,
        };
        let items = match self.config.policy {
            Policy::Random => sample_random(&mut self.cursors, b, &mut self.rng, self.config.exhaustion),
            Policy::TaskSize => sample_task_size(&mut self.cursors, b, &mut self.rng, self.config.exhaustion),
            Policy::Uncertainty => self.uncertainty_batch(model, &mut trace)?,
        };
        for s in &items {
            trace.composition[s.task] += 1;
            self.selected[s.task] += 1;
        }
        trace.drawn = self.total_drawn() - drawn_before;
        self.step += 1;
        Ok(Batch { items, trace })
    }

    fn uncertainty_batch<P: Predictor + ?Sized>(&mut self, model: &P, trace: &mut StepTrace) -> Result<Vec<Selection>> {
        let b = self.config.batch_size;
        let scoring = self.config.regression;
        let excluded: Vec<usize> = (0..self.cursors.len())
            .filter(|&t| !scored(self.cursors[t].kind(), scoring))
            .collect();
        // Excluded tasks get the slots a uniform task draw would give them.
        let mut items = Vec::with_capacity(b);
        let mut from_pool = b;
        if !excluded.is_empty() {
            from_pool = 0;
            for _ in 0..b {
                let t = self.rng.random_range(0..self.cursors.len());
                if excluded.contains(&t) {
                    let example = self.cursors[t].draw();
                    items.push(Selection { task: t, example });
                } else {
                    from_pool += 1;
                }
            }
        }
        if from_pool == 0 || excluded.len() == self.cursors.len() {
            return Ok(items);
        }
        let chosen = match score_pool(model, &mut self.cursors, b, scoring) {
            Ok(pool) => {
                trace.mean_entropy = pool.mean_entropy.clone();
                trace.max_mean_entropy = Some(pool.max_mean_entropy);
                select_top(&pool, from_pool)
            }
            Err(SamplerError::Degenerate(pool)) => {
                log::warn!("step {}: every scored prediction is certain; sampling tasks uniformly", self.step);
                trace.mean_entropy = pool.mean_entropy.clone();
                trace.max_mean_entropy = Some(0.0);
                trace.degenerate = true;
                select_random_from_pool(&pool, from_pool, &mut self.rng)
            }
            Err(e) => return Err(e),
        };
        items.extend(chosen.into_iter().map(|c| Selection {
            task: c.task,
            example: c.example,
        }));
        Ok(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Target;
    use std::sync::Arc;

    /// Returns fixed predictions per task.
    struct Fixed(Vec<(String, Prediction)>);

    impl Predictor for Fixed {
        fn predict_many(&self, task: &str, inputs: &[&[u32]]) -> std::result::Result<Vec<Prediction>, ModelError> {
            let p = &self.0.iter().find(|(t, _)| t == task).unwrap().1;
            Ok(vec![p.clone(); inputs.len()])
        }
    }

    fn data(n: usize) -> Dataset {
        Arc::new((0..n).map(|i| Example::new(vec![1, i as u32], Target::Class(0))).collect())
    }

    fn cls(c: usize) -> TaskKind {
        TaskKind::Classification { classes: c }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let direct = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((shannon_entropy(&[0.7, 0.2, 0.1]).unwrap() - direct).abs() < 1e-12);
        assert!(shannon_entropy(&[0.5, 0.6]).is_err());
        assert!(shannon_entropy(&[1.5, -0.5]).is_err());
        assert!(shannon_entropy(&[]).is_err());
    }

    #[test]
    fn uniform_entropy_is_log_classes() {
        assert!(max_entropy_uniform(1).is_err());
        for c in 2..10 {
            let uniform = vec![1.0 / c as f64; c];
            let h = shannon_entropy(&uniform).unwrap();
            assert!((h - max_entropy_uniform(c).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_binary_pool_scores_inverse_log_two() {
        let mut cursors = vec![TaskCursor::new("a", cls(2), data(10), 1).unwrap()];
        let model = Fixed(vec![("a".into(), Prediction::Probs(vec![0.5, 0.5]))]);
        let pool = score_pool(&model, &mut cursors, 4, RegressionScoring::default()).unwrap();
        assert_eq!(pool.candidates.len(), 4);
        for c in &pool.candidates {
            assert!((c.uncertainty - 1.0 / 2f64.ln()).abs() < 1e-12);
        }
        assert_eq!(cursors[0].position(), 4);
        assert_eq!(select_top_b(&pool).len(), 4);
    }

    #[test]
    fn class_count_normalization_cancels_for_uniform_predictions() {
        let mut cursors = vec![
            TaskCursor::new("a", cls(2), data(10), 1).unwrap(),
            TaskCursor::new("b", cls(10), data(10), 2).unwrap(),
        ];
        let model = Fixed(vec![
            ("a".into(), Prediction::Probs(vec![0.5; 2])),
            ("b".into(), Prediction::Probs(vec![0.1; 10])),
        ]);
        let pool = score_pool(&model, &mut cursors, 3, RegressionScoring::default()).unwrap();
        let u0 = pool.candidates[0].uncertainty;
        assert!(pool.candidates.iter().all(|c| (c.uncertainty - u0).abs() < 1e-12));
        let top = select_top_b(&pool);
        assert!(top.iter().all(|c| c.task == 0), "ties resolve to registration order");
        assert_eq!(top.iter().map(|c| c.draw).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn top_b_brute_force_example() {
        let mk = |task, draw, u| Candidate {
            task,
            draw,
            example: draw,
            entropy: u,
            uncertainty: u,
        };
        let pool = CandidatePool {
            batch_size: 2,
            candidates: vec![mk(0, 0, 0.9), mk(0, 1, 0.1), mk(1, 0, 0.8), mk(1, 1, 0.7)],
            mean_entropy: vec![Some(0.5), Some(0.75)],
            max_mean_entropy: 0.75,
        };
        let top = select_top_b(&pool);
        assert_eq!(top.iter().map(|c| (c.task, c.draw)).collect::<Vec<_>>(), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn certain_predictions_signal_degenerate_pool() {
        let mut cursors = vec![TaskCursor::new("a", cls(2), data(5), 1).unwrap()];
        let model = Fixed(vec![("a".into(), Prediction::Probs(vec![1.0, 0.0]))]);
        match score_pool(&model, &mut cursors, 2, RegressionScoring::default()) {
            Err(SamplerError::Degenerate(pool)) => assert_eq!(pool.candidates.len(), 2),
            other => panic!("expected degenerate pool, got {other:?}"),
        }
        let tasks = [TaskData::new("a", cls(2), data(5).to_vec(), vec![], vec![])];
        let cfg = SamplerConfig {
            policy: Policy::Uncertainty,
            batch_size: 3,
            regression: RegressionScoring::default(),
            exhaustion: Exhaustion::default(),
        };
        let mut sampler = Sampler::new(cfg, &tasks, 4).unwrap();
        let batch = sampler.next_batch(&model).unwrap();
        assert!(batch.trace.degenerate);
        assert_eq!(batch.items.len(), 3);
    }

    #[test]
    fn cursor_reloads_after_exhaustion() {
        let mut c = TaskCursor::new("a", cls(2), data(3), 9).unwrap();
        let first: Vec<usize> = (0..3).map(|_| c.draw()).collect();
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert_eq!(c.reload_count(), 0);
        assert!(c.is_exhausted());
        c.draw();
        assert_eq!((c.reload_count(), c.position(), c.drawn()), (1, 1, 4));
        assert!(TaskCursor::new("e", cls(2), data(0), 1).is_err());
    }

    #[test]
    fn regression_bins_match_binary_classification() {
        let kind = TaskKind::Regression { min: 0.0, max: 5.0 };
        let p = regression_distribution(3.1, 0.0, 5.0, REGRESSION_SHARPNESS);
        let (h_reg, n_reg) = prediction_entropy(&Prediction::Value(3.1), kind, RegressionScoring::default())
            .unwrap()
            .unwrap();
        let (h_cls, n_cls) = prediction_entropy(&Prediction::Probs(p.to_vec()), cls(2), RegressionScoring::default())
            .unwrap()
            .unwrap();
        assert_eq!((h_reg, n_reg), (h_cls, n_cls));
        assert_eq!(regression_distribution(2.5, 0.0, 5.0, 8.0), [0.5, 0.5]);
        assert_eq!(regression_distribution(-40.0, 0.0, 5.0, 4.0), regression_distribution(0.0, 0.0, 5.0, 4.0));
        assert!(prediction_entropy(&Prediction::Value(1.0), kind, RegressionScoring::Exclude).is_none());
    }

    #[test]
    fn excluded_regression_tasks_fill_by_uniform_draw() {
        let reg = TaskKind::Regression { min: 0.0, max: 1.0 };
        let tasks = [
            TaskData::new("a", cls(2), data(50).to_vec(), vec![], vec![]),
            TaskData::new("r", reg, data(50).to_vec(), vec![], vec![]),
        ];
        let model = Fixed(vec![("a".into(), Prediction::Probs(vec![0.6, 0.4]))]);
        let cfg = SamplerConfig {
            policy: Policy::Uncertainty,
            batch_size: 8,
            regression: RegressionScoring::Exclude,
            exhaustion: Exhaustion::default(),
        };
        let mut sampler = Sampler::new(cfg, &tasks, 5).unwrap();
        let mut seen = [0; 2];
        for _ in 0..20 {
            let batch = sampler.next_batch(&model).unwrap();
            assert_eq!(batch.items.len(), 8);
            assert!(batch.trace.mean_entropy[1].is_none());
            seen[0] += batch.trace.composition[0];
            seen[1] += batch.trace.composition[1];
        }
        assert!(seen[0] > 0 && seen[1] > 0);
    }

    #[test]
    fn wait_for_epoch_drains_every_task_before_reloading() {
        let mut cursors = vec![
            TaskCursor::new("a", cls(2), data(2), 1).unwrap(),
            TaskCursor::new("b", cls(2), data(6), 2).unwrap(),
        ];
        let mut rng = rng_from_seed(3);
        let picks = sample_random(&mut cursors, 8, &mut rng, Exhaustion::WaitForEpoch);
        assert_eq!(picks.iter().filter(|s| s.task == 0).count(), 2);
        assert_eq!(cursors.iter().map(TaskCursor::reload_count).sum::<usize>(), 0);
        sample_random(&mut cursors, 1, &mut rng, Exhaustion::WaitForEpoch);
        assert!(cursors.iter().all(|c| c.reload_count() == 1));
    }

    #[test]
    fn seeded_sampling_repeats() {
        let run = || {
            let mut cursors = vec![
                TaskCursor::new("a", cls(2), data(7), 1).unwrap(),
                TaskCursor::new("b", cls(2), data(3), 2).unwrap(),
            ];
            let mut rng = rng_from_seed(11);
            sample_task_size(&mut cursors, 50, &mut rng, Exhaustion::ReloadImmediately)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn policy_names_parse() {
        assert_eq!("random".parse::<Policy>().unwrap(), Policy::Random);
        assert_eq!("task-size".parse::<Policy>().unwrap(), Policy::TaskSize);
        assert!("greedy".parse::<Policy>().is_err());
    }
}
