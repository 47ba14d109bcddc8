//! Labelled token sequences grouped by task.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{Target, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target: Target,
}

impl Example {
    pub fn new(tokens: Vec<u32>, target: Target) -> Self {
        Example { tokens, target }
    }
}

pub type Dataset = Arc<Vec<Example>>;

/// One task's splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub kind: TaskKind,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl TaskData {
    pub fn new(name: impl Into<String>, kind: TaskKind, train: Vec<Example>, dev: Vec<Example>, test: Vec<Example>) -> Self {
        TaskData {
            name: name.into(),
            kind,
            train: Arc::new(train),
            dev: Arc::new(dev),
            test: Arc::new(test),
        }
    }
}
