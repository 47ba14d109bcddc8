//! Named parameter storage shared by every model component.

use std::collections::{BTreeSet, HashMap};

use crate::tensor::{Gradients, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    tensor: Tensor,
    /// Rows read during the last backward pass (row-sparse parameters only).
    touched_rows: Option<BTreeSet<usize>>,
    row_sparse: bool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    /// Row-sparse parameters (lookup tables) are only updated on rows that
    /// were actually read in the step.
    pub fn row_sparse(&self) -> bool {
        self.row_sparse
    }

    pub fn touched_rows(&self) -> Option<&BTreeSet<usize>> {
        self.touched_rows.as_ref()
    }
}

/// Insertion-ordered parameter registry. Ids are stable for the life of the
/// store and names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::invalid("param", format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            touched_rows: None,
            row_sparse: false,
        });
        Ok(id)
    }

    pub fn set_row_sparse(&mut self, id: ParamId, row_sparse: bool) {
        self.params[id.0].row_sparse = row_sparse;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a parameter's value, keeping its trainable flag.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) {
        let p = &mut self.params[id.0];
        let trainable = p.tensor.requires_grad();
        p.tensor = tensor.with_requires_grad(trainable);
        p.touched_rows = None;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].tensor.set_requires_grad(trainable);
    }

    /// Copies gradients from a finished backward pass into the parameters.
    pub fn absorb(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            p.tensor.accumulate_grad(g)?;
            if p.row_sparse {
                let rows = grads.touched_rows(id).cloned().unwrap_or_default();
                p.touched_rows.get_or_insert_with(BTreeSet::new).extend(rows);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
            p.touched_rows = None;
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }
}
