//! Two-column `text<TAB>label` files.

use std::collections::BTreeMap;
use std::path::Path;

use super::{HarnessError, Result};
use crate::data::Example;
use crate::model::{Target, TaskKind, CLS_ID};

/// Word-to-id table shared by every file ingested in one run.
///
/// Ids `2 .. 2 + capacity` are assigned to words in first-seen order. Once
/// those run out, unseen words hash into the remaining `buckets` ids, so the
/// whole table never exceeds the model vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: BTreeMap<String, u32>,
    capacity: usize,
    buckets: usize,
    seed: u64,
    frozen: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, word: &str) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl Vocabulary {
    /// Splits the `vocab_size - 2` content ids between learned words and hash
    /// buckets.
    pub fn new(vocab_size: usize, buckets: usize, seed: u64) -> Result<Self> {
        let content = vocab_size.saturating_sub(2);
        if buckets == 0 || buckets > content {
            return Err(HarnessError::Config(format!(
                "need 1..={content} hash buckets for a vocabulary of {vocab_size}"
            )));
        }
        Ok(Vocabulary {
            words: BTreeMap::new(),
            capacity: content - buckets,
            buckets,
            seed,
            frozen: false,
        })
    }

    /// Stops assigning ids to new words; later unknown words hash.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> u32 {
        match self.words.get(word) {
            Some(&id) => id,
            None => self.hashed(word),
        }
    }

    fn hashed(&self, word: &str) -> u32 {
        (2 + self.capacity as u64 + fnv1a(self.seed, word) % self.buckets as u64) as u32
    }

    pub fn id(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.words.get(word) {
            return id;
        }
        if !self.frozen && self.words.len() < self.capacity {
            let id = 2 + self.words.len() as u32;
            self.words.insert(word.to_string(), id);
            return id;
        }
        self.hashed(word)
    }
}

/// Parses a TSV body. `origin` names the source in error messages.
pub fn parse_tsv(text: &str, origin: &str, kind: TaskKind, seq_len: usize, vocab: &mut Vocabulary) -> Result<Vec<Example>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if !header.trim().is_empty() => {}
        _ => return Err(HarnessError::Tsv { origin: origin.into(), line: 1, reason: "empty file".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| HarnessError::Tsv {
            origin: origin.into(),
            line: line_no,
            reason,
        };
        let mut cols = line.split('\t');
        let text = cols.next().unwrap_or_default();
        let label = cols.next().ok_or_else(|| err("missing label column".into()))?.trim();
        if cols.next().is_some() {
            return Err(err("expected exactly two columns".into()));
        }
        let target = match kind {
            TaskKind::Classification { classes } => {
                let c: usize = label.parse().map_err(|_| err(format!("label `{label}` is not a class index")))?;
                if c >= classes {
                    return Err(err(format!("class {c} is out of range for {classes} classes")));
                }
                Target::Class(c)
            }
            TaskKind::Regression { .. } => {
                let v: f64 = label.parse().map_err(|_| err(format!("label `{label}` is not a number")))?;
                if !v.is_finite() {
                    return Err(err(format!("label `{label}` is not finite")));
                }
                Target::Value(v)
            }
        };
        let mut tokens = vec![CLS_ID];
        tokens.extend(text.split_whitespace().take(seq_len.saturating_sub(1)).map(|w| vocab.id(w)));
        out.push(Example::new(tokens, target));
    }
    if out.is_empty() {
        return Err(HarnessError::Tsv { origin: origin.into(), line: 1, reason: "no data rows".into() });
    }
    Ok(out)
}

pub fn ingest_tsv(path: &Path, kind: TaskKind, seq_len: usize, vocab: &mut Vocabulary) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_tsv(&text, &path.display().to_string(), kind, seq_len, vocab)
}
