//! Seeded toy tasks over token sequences.
//!
//! Every sequence starts with the CLS id and holds content tokens drawn from
//! ids `2 .. 2 + vocab`. Each task picks its own motif tokens from that range
//! with its seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::SyntheticSource;
use super::{HarnessError, Result};
use crate::data::Example;
use crate::init::{rng_from_seed, ModelRng};
use crate::model::{Target, TaskKind, CLS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Binary: does the motif occur as a contiguous run. Negative sequences
    /// contain no motif token at all.
    PatternPresence,
    /// `C` classes: which of `C` disjoint token groups is most frequent.
    Majority,
    /// Binary: parity of the number of marker tokens.
    MotifParity,
    /// Regression: share of motif tokens, mapped onto the target range.
    BoundedScore,
}

/// Splits produced by one generator run.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// Motif tokens the task was built around.
    pub motif: Vec<u32>,
}

struct Ctx {
    rng: ModelRng,
    content: Vec<u32>,
    motif: Vec<u32>,
    min_len: usize,
    max_len: usize,
}

impl Ctx {
    fn length(&mut self) -> usize {
        self.rng.random_range(self.min_len..=self.max_len)
    }

    fn pick(&mut self, pool: &[u32]) -> u32 {
        pool[self.rng.random_range(0..pool.len())]
    }
}

/// Builds the train, dev and test splits of a synthetic task. `seq_len` and
/// `vocab_size` describe the model the data feeds.
pub fn generate(source: &SyntheticSource, kind: TaskKind, seq_len: usize, vocab_size: usize) -> Result<Splits> {
    let bad = |m: String| Err(HarnessError::Config(m));
    let available = vocab_size.saturating_sub(2);
    let vocab = source.vocab.unwrap_or(available);
    if vocab > available {
        return bad(format!("synthetic vocab {vocab} exceeds the model's {available} content ids"));
    }
    if source.motif_len == 0 || source.motif_len >= vocab {
        return bad(format!("motif length {} must lie in 1..{vocab}", source.motif_len));
    }
    let max_len = seq_len.saturating_sub(1);
    let min_len = source.min_len.unwrap_or((max_len / 2).max(source.motif_len)).max(1);
    if min_len > max_len || source.motif_len > max_len {
        return bad(format!("sequence length {seq_len} is too short for this generator"));
    }
    match (source.generator, kind) {
        (Generator::PatternPresence | Generator::MotifParity, TaskKind::Classification { classes: 2 }) => {}
        (Generator::Majority, TaskKind::Classification { classes }) if classes <= vocab => {}
        (Generator::BoundedScore, TaskKind::Regression { .. }) => {}
        (g, k) => return bad(format!("generator {g:?} cannot produce a {k:?} task")),
    }

    let mut rng = rng_from_seed(source.seed);
    let mut content: Vec<u32> = (2..2 + vocab as u32).collect();
    content.shuffle(&mut rng);
    let motif = content[..source.motif_len].to_vec();
    let mut ctx = Ctx {
        rng,
        content,
        motif,
        min_len,
        max_len,
    };
    let total = source.size + source.dev_size + source.test_size;
    let mut all = Vec::with_capacity(total);
    for i in 0..total {
        let (content, clean) = match source.generator {
            Generator::PatternPresence => pattern_presence(&mut ctx, i % 2 == 1),
            Generator::Majority => majority(&mut ctx, kind),
            Generator::MotifParity => parity(&mut ctx),
            Generator::BoundedScore => bounded(&mut ctx, kind),
        };
        let target = if ctx.rng.random::<f64>() < source.noise {
            match kind {
                TaskKind::Classification { classes } => Target::Class(ctx.rng.random_range(0..classes)),
                TaskKind::Regression { min, max } => Target::Value(ctx.rng.random_range(min..=max)),
            }
        } else {
            clean
        };
        let mut tokens = Vec::with_capacity(content.len() + 1);
        tokens.push(CLS_ID);
        tokens.extend(content);
        all.push(Example::new(tokens, target));
    }
    let test = all.split_off(source.size + source.dev_size);
    let dev = all.split_off(source.size);
    Ok(Splits {
        train: all,
        dev,
        test,
        motif: ctx.motif,
    })
}

fn pattern_presence(ctx: &mut Ctx, positive: bool) -> (Vec<u32>, Target) {
    let filler: Vec<u32> = ctx.content[ctx.motif.len()..].to_vec();
    let n = ctx.length();
    let mut seq: Vec<u32> = (0..n).map(|_| ctx.pick(&filler)).collect();
    if positive {
        let at = ctx.rng.random_range(0..=n - ctx.motif.len());
        seq[at..at + ctx.motif.len()].copy_from_slice(&ctx.motif);
    }
    (seq, Target::Class(positive as usize))
}

fn majority(ctx: &mut Ctx, kind: TaskKind) -> (Vec<u32>, Target) {
    let classes = kind.output_dim();
    let group = |t: u32, content: &[u32]| content.iter().position(|&c| c == t).unwrap() % classes;
    loop {
        let n = ctx.length();
        let content = ctx.content.clone();
        let seq: Vec<u32> = (0..n).map(|_| ctx.pick(&content)).collect();
        let mut counts = vec![0usize; classes];
        for &t in &seq {
            counts[group(t, &content)] += 1;
        }
        let best = *counts.iter().max().unwrap();
        if counts.iter().filter(|&&c| c == best).count() == 1 {
            let label = counts.iter().position(|&c| c == best).unwrap();
            return (seq, Target::Class(label));
        }
    }
}

fn parity(ctx: &mut Ctx) -> (Vec<u32>, Target) {
    let marker = ctx.motif[0];
    let filler: Vec<u32> = ctx.content[1..].to_vec();
    let n = ctx.length();
    let mut seq: Vec<u32> = (0..n).map(|_| ctx.pick(&filler)).collect();
    let k = ctx.rng.random_range(0..=n.min(4));
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut ctx.rng);
    for &s in &slots[..k] {
        seq[s] = marker;
    }
    (seq, Target::Class(k % 2))
}

fn bounded(ctx: &mut Ctx, kind: TaskKind) -> (Vec<u32>, Target) {
    let TaskKind::Regression { min, max } = kind else {
        unreachable!("checked by generate")
    };
    let filler: Vec<u32> = ctx.content[ctx.motif.len()..].to_vec();
    let motif = ctx.motif.clone();
    let n = ctx.length();
    let q: f64 = ctx.rng.random();
    let seq: Vec<u32> = (0..n)
        .map(|_| {
            if ctx.rng.random::<f64>() < q {
                ctx.pick(&motif)
            } else {
                ctx.pick(&filler)
            }
        })
        .collect();
    let share = seq.iter().filter(|t| motif.contains(t)).count() as f64 / n as f64;
    (seq, Target::Value(min + share * (max - min)))
}
