//! Gradient-descent updates with a warmup-then-decay schedule.

use std::collections::BTreeMap;

use super::config::{Decay, OptimizerConfig, OptimizerKind};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam or plain SGD over the trainable parameters of a store.
///
/// Row-sparse parameters (the task embedding table) are updated lazily: only
/// rows that received gradient this step move, and only their moment
/// estimates advance, so tasks absent from a batch keep their embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    total_steps: usize,
    warmup_steps: usize,
    step: usize,
    state: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, total_steps: usize) -> Self {
        let warmup_steps = (config.warmup_fraction * total_steps as f64).ceil() as usize;
        Optimizer {
            config,
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    /// Learning rate of the update with zero-based index `step`: a linear
    /// ramp over the warmup steps, then linear decay to zero at the last step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let base = self.config.learning_rate;
        let w = self.warmup_steps;
        if step < w {
            return base * (step + 1) as f64 / w as f64;
        }
        match self.config.decay {
            Decay::Constant => base,
            Decay::Linear => {
                let span = self.total_steps.saturating_sub(w);
                if span == 0 {
                    base
                } else {
                    base * self.total_steps.saturating_sub(step) as f64 / span as f64
                }
            }
        }
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// clears them. Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let lr = self.learning_rate(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let param = store.param(id);
            if !param.trainable() {
                continue;
            }
            let Some(grad) = param.tensor().grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let cols = if param.tensor().shape().len() == 2 { param.tensor().cols() } else { grad.len() };
            let ranges: Vec<std::ops::Range<usize>> = match (param.row_sparse(), param.touched_rows()) {
                (true, Some(rows)) => rows.iter().map(|&r| r * cols..(r + 1) * cols).collect(),
                (true, None) => Vec::new(),
                (false, _) => vec![0..grad.len()],
            };
            let n = grad.len();
            let moments = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if moments.m.len() != n {
                // The table grew (a task was added): keep existing rows.
                moments.m.resize(n, 0.0);
                moments.v.resize(n, 0.0);
            }
            let data = store.get_mut(id).data_mut();
            for range in ranges {
                for i in range {
                    let g = grad[i];
                    let delta = match c.kind {
                        OptimizerKind::Sgd => g,
                        OptimizerKind::Adam => {
                            moments.m[i] = c.beta1 * moments.m[i] + (1.0 - c.beta1) * g;
                            moments.v[i] = c.beta2 * moments.v[i] + (1.0 - c.beta2) * g * g;
                            let m_hat = moments.m[i] / (1.0 - c.beta1.powi(t));
                            let v_hat = moments.v[i] / (1.0 - c.beta2.powi(t));
                            m_hat / (v_hat.sqrt() + c.eps)
                        }
                    };
                    data[i] -= lr * (delta + c.weight_decay * data[i]);
                }
            }
        }
        store.zero_grad();
        lr
    }
}
