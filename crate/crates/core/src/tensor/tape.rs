use std::borrow::Cow;
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::kernels::{
    canonical_sum, gelu, gelu_grad, matmul_a_bt, matmul_at_b, matmul_slices, softmax_in_place,
    transpose,
};
use super::{Result, Tensor, TensorError};
use crate::params::{ParamId, ParamStore};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    RowMean(Var),
    RowVar(Var),
    Sqrt(Var),
    Recip(Var),
    Gelu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
    DirectSum(Vec<Var>),
    CrossEntropy { logits: Var, target: usize },
    SquaredError { pred: Var, target: f64 },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order so gradients can be propagated in
/// reverse. Inputs always precede their consumers.
///
/// A tape supports exactly one backward pass. Parameters are borrowed from
/// the [`ParamStore`] for the tape's lifetime, so many inference tapes may
/// read the same store concurrently.
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
    param_vars: RefCell<BTreeMap<ParamId, Var>>,
    touched_rows: RefCell<HashMap<usize, BTreeSet<usize>>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: BTreeMap<ParamId, Vec<f64>>,
    touched_rows: BTreeMap<ParamId, BTreeSet<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Rows of a parameter that were read through [`Tape::gather_rows`].
    pub fn touched_rows(&self, id: ParamId) -> Option<&BTreeSet<usize>> {
        self.touched_rows.get(&id)
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn last_dim_rows(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that never records gradients; used for scoring and evaluation.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(BTreeMap::new()),
            touched_rows: RefCell::new(HashMap::new()),
            grad_enabled,
            consumed: Cell::new(false),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(nodes.len() - 1)
    }

    /// Registers an owned tensor as a leaf. Its `requires_grad` flag decides
    /// whether backward reports a gradient for it.
    pub fn leaf(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Borrows a parameter as a leaf. Repeated calls return the same node.
    /// Nodes are keyed by id alone, so a tape must only ever see one store.
    pub fn param(&self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        );
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn values(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.to_vec()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "expected a scalar, found shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    fn unary<F>(&self, a: Var, op: Op, f: F) -> Var
    where
        F: Fn(f64) -> f64,
    {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect::<Vec<_>>(), n.requires_grad)
        };
        self.push(shape, Cow::Owned(value), op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    fn binary<F>(&self, opname: &'static str, a: Var, b: Var, op: Op, f: F) -> Result<Var>
    where
        F: Fn(f64, f64) -> f64,
    {
        let shape = self.same_shape(opname, a, b)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0], &nodes[b.0]);
            (
                x.value.iter().zip(y.value.iter()).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>(),
                x.requires_grad || y.requires_grad,
            )
        };
        Ok(self.push(shape, Cow::Owned(value), op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        };
        let (m, k) = as_matrix(&na.shape).ok_or_else(mismatch)?;
        let (k2, n) = as_matrix(&nb.shape).ok_or_else(mismatch)?;
        if k != k2 {
            return Err(mismatch());
        }
        let value = matmul_slices(&na.value, &nb.value, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.push(vec![m, n], Cow::Owned(value), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let (r, c) = as_matrix(&na.shape)
            .ok_or_else(|| TensorError::invalid("transpose", "expects a matrix"))?;
        let value = transpose(&na.value, r, c);
        let rg = na.requires_grad;
        drop(nodes);
        Ok(self.push(vec![c, r], Cow::Owned(value), Op::Transpose(a), rg))
    }

    // Broadcasts: `v` has one entry per column (row ops) or per row (col ops).
    fn broadcast(&self, opname: &'static str, a: Var, v: Var, per_column: bool) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let (sa, sv) = (&nodes[a.0].shape, &nodes[v.0].shape);
        let mismatch = || TensorError::ShapeMismatch {
            op: opname,
            lhs: sa.clone(),
            rhs: sv.clone(),
        };
        let (r, c) = as_matrix(sa).ok_or_else(mismatch)?;
        let want = if per_column { c } else { r };
        if sv.len() != 1 || sv[0] != want {
            return Err(mismatch());
        }
        Ok((r, c))
    }

    fn broadcast_apply<F>(&self, a: Var, v: Var, per_column: bool, op: Op, f: F) -> Var
    where
        F: Fn(f64, f64) -> f64,
    {
        let nodes = self.nodes.borrow();
        let (na, nv) = (&nodes[a.0], &nodes[v.0]);
        let c = *na.shape.last().unwrap();
        let value: Vec<f64> = na
            .value
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let k = if per_column { idx % c } else { idx / c };
                f(x, nv.value[k])
            })
            .collect();
        let rg = na.requires_grad || nv.requires_grad;
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, Cow::Owned(value), op, rg)
    }

    /// Adds vector `v` (length = columns) to every row of `a`.
    pub fn add_row(&self, a: Var, v: Var) -> Result<Var> {
        self.broadcast("add_row", a, v, true)?;
        Ok(self.broadcast_apply(a, v, true, Op::AddRow(a, v), |x, y| x + y))
    }

    /// Multiplies every row of `a` elementwise by `v` (length = columns).
    pub fn mul_row(&self, a: Var, v: Var) -> Result<Var> {
        self.broadcast("mul_row", a, v, true)?;
        Ok(self.broadcast_apply(a, v, true, Op::MulRow(a, v), |x, y| x * y))
    }

    /// Adds `v[i]` to every entry of row `i`.
    pub fn add_col(&self, a: Var, v: Var) -> Result<Var> {
        self.broadcast("add_col", a, v, false)?;
        Ok(self.broadcast_apply(a, v, false, Op::AddCol(a, v), |x, y| x + y))
    }

    /// Multiplies every entry of row `i` by `v[i]`.
    pub fn mul_col(&self, a: Var, v: Var) -> Result<Var> {
        self.broadcast("mul_col", a, v, false)?;
        Ok(self.broadcast_apply(a, v, false, Op::MulCol(a, v), |x, y| x * y))
    }

    fn check_scalar(&self, opname: &'static str, a: Var, s: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[s.0].value.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: nodes[a.0].shape.clone(),
                rhs: nodes[s.0].shape.clone(),
            });
        }
        Ok(())
    }

    /// Multiplies every entry of `a` by the one-element node `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("scale_by", a, s)?;
        let k = self.nodes.borrow()[s.0].value[0];
        let rg = self.requires_grad(s);
        let out = self.unary(a, Op::ScaleBy(a, s), |x| x * k);
        if rg {
            self.nodes.borrow_mut()[out.0].requires_grad = self.grad_enabled;
        }
        Ok(out)
    }

    /// Adds the one-element node `s` to every entry of `a`.
    pub fn shift_by(&self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("shift_by", a, s)?;
        let k = self.nodes.borrow()[s.0].value[0];
        let rg = self.requires_grad(s);
        let out = self.unary(a, Op::ShiftBy(a, s), |x| x + k);
        if rg {
            self.nodes.borrow_mut()[out.0].requires_grad = self.grad_enabled;
        }
        Ok(out)
    }

    /// Per-row mean and population variance over the last dimension.
    pub fn layer_stats(&self, a: Var) -> (Var, Var) {
        let (mean_v, var_v, shape, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let (rows, c) = last_dim_rows(&n.shape);
            let mut means = Vec::with_capacity(rows);
            let mut vars = Vec::with_capacity(rows);
            for row in n.value.chunks(c) {
                let mu = row.iter().fold(0.0, |s, x| s + x) / c as f64;
                let var = row.iter().fold(0.0, |s, x| s + (x - mu) * (x - mu)) / c as f64;
                means.push(mu);
                vars.push(var);
            }
            (means, vars, vec![rows], n.requires_grad)
        };
        let mean = self.push(shape.clone(), Cow::Owned(mean_v), Op::RowMean(a), rg);
        let var = self.push(shape, Cow::Owned(var_v), Op::RowVar(a), rg);
        (mean, var)
    }

    /// Softmax over the last dimension.
    pub fn softmax_lastdim(&self, a: Var) -> Var {
        let (shape, value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let (_, c) = last_dim_rows(&n.shape);
            let mut value = n.value.to_vec();
            value.chunks_mut(c).for_each(softmax_in_place);
            (n.shape.clone(), value, n.requires_grad)
        };
        self.push(shape, Cow::Owned(value), Op::Softmax(a), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.value.iter().fold(0.0, |acc, x| acc + x), n.requires_grad)
        };
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.value.iter().fold(0.0, |acc, x| acc + x) / n.value.len() as f64, n.requires_grad)
        };
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean(a), rg)
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn add_all(&self, items: &[Var]) -> Result<Var> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| TensorError::invalid("add_all", "empty list"))?;
        rest.iter().try_fold(*first, |acc, v| self.add(acc, *v))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[a.0];
        let (r, c) = as_matrix(&n.shape)
            .ok_or_else(|| TensorError::invalid("slice_cols", "expects a matrix"))?;
        if len == 0 || start + len > c {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for {c}", start + len),
            ));
        }
        let mut value = Vec::with_capacity(r * len);
        for row in n.value.chunks(c) {
            value.extend_from_slice(&row[start..start + len]);
        }
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.push(vec![r, len], Cow::Owned(value), Op::SliceCols { src: a, start }, rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_cols", "empty list"))?;
        let (r, _) = as_matrix(&nodes[first.0].shape)
            .ok_or_else(|| TensorError::invalid("concat_cols", "expects matrices"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            match as_matrix(&nodes[p.0].shape) {
                Some((pr, pc)) if pr == r => widths.push(pc),
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[first.0].shape.clone(),
                        rhs: nodes[p.0].shape.clone(),
                    })
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&nodes[p.0].value[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.0].requires_grad);
        drop(nodes);
        Ok(self.push(vec![r, total], Cow::Owned(value), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows of a matrix; the result is `[ids.len() × cols]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[table.0];
        let (r, c) = as_matrix(&n.shape)
            .ok_or_else(|| TensorError::invalid("gather_rows", "expects a matrix"))?;
        if ids.is_empty() {
            return Err(TensorError::invalid("gather_rows", "no rows requested"));
        }
        let mut value = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= r {
                return Err(TensorError::invalid(
                    "gather_rows",
                    format!("row {i} out of range for {r} rows"),
                ));
            }
            value.extend_from_slice(&n.value[i * c..(i + 1) * c]);
        }
        let rg = n.requires_grad;
        let is_leaf = matches!(n.op, Op::Leaf);
        drop(nodes);
        if is_leaf && rg && self.grad_enabled {
            self.touched_rows
                .borrow_mut()
                .entry(table.0)
                .or_default()
                .extend(ids.iter().copied());
        }
        Ok(self.push(
            vec![ids.len(), c],
            Cow::Owned(value),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, table: Var, i: usize) -> Result<Var> {
        let g = self.gather_rows(table, &[i])?;
        let c = self.shape(g)[1];
        self.reshape(g, &[c])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[a.0];
        if shape.is_empty() || shape.iter().product::<usize>() != n.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = n.value.to_vec();
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.push(shape.to_vec(), Cow::Owned(value), Op::Reshape(a), rg))
    }

    /// Block-diagonal composition of square matrices; off-block entries are 0.
    pub fn direct_sum(&self, blocks: &[Var]) -> Result<Var> {
        if blocks.is_empty() {
            return Err(TensorError::invalid("direct_sum", "empty block list"));
        }
        let nodes = self.nodes.borrow();
        let mut sides = Vec::with_capacity(blocks.len());
        for b in blocks {
            match as_matrix(&nodes[b.0].shape) {
                Some((r, c)) if r == c => sides.push(r),
                _ => {
                    return Err(TensorError::invalid(
                        "direct_sum",
                        format!("block of shape {:?} is not square", nodes[b.0].shape),
                    ))
                }
            }
        }
        let total: usize = sides.iter().sum();
        let mut value = vec![0.0; total * total];
        let mut offset = 0;
        for (b, &s) in blocks.iter().zip(&sides) {
            let src = &nodes[b.0].value;
            for i in 0..s {
                value[(offset + i) * total + offset..(offset + i) * total + offset + s]
                    .copy_from_slice(&src[i * s..(i + 1) * s]);
            }
            offset += s;
        }
        let rg = blocks.iter().any(|b| nodes[b.0].requires_grad);
        drop(nodes);
        Ok(self.push(vec![total, total], Cow::Owned(value), Op::DirectSum(blocks.to_vec()), rg))
    }

    /// `-log softmax(logits)[target]` for a logit vector.
    pub fn cross_entropy(&self, logits: Var, target: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[logits.0];
        if n.shape.len() != 1 || target >= n.value.len() {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("target {target} invalid for logits of shape {:?}", n.shape),
            ));
        }
        let max = n.value.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + n.value.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - n.value[target];
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy { logits, target },
            rg,
        ))
    }

    /// `(pred - target)²` for a one-element prediction.
    pub fn squared_error(&self, pred: Var, target: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let n = &nodes[pred.0];
        if n.value.len() != 1 {
            return Err(TensorError::invalid(
                "squared_error",
                format!("prediction must be a scalar, found {:?}", n.shape),
            ));
        }
        let d = n.value[0] - target;
        let rg = n.requires_grad;
        drop(nodes);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![d * d]),
            Op::SquaredError { pred, target },
            rg,
        ))
    }

    /// Propagates gradients from the scalar `loss` to every leaf that
    /// requires them. Contributions reaching a node from several consumers
    /// are combined with an order-independent reduction.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(TensorError::Usage("backward on an inference tape".into()));
        }
        if self.consumed.get() {
            return Err(TensorError::Usage("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Usage("loss does not belong to this tape".into()))?;
        if root.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar, found shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Err(TensorError::Usage(
                "loss is detached: no input requires gradients".into(),
            ));
        }
        self.consumed.set(true);

        let mut pending: Vec<Vec<Vec<f64>>> = vec![Vec::new(); loss.0 + 1];
        pending[loss.0].push(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || pending[idx].is_empty() {
                continue;
            }
            let g = canonical_sum(std::mem::take(&mut pending[idx]));
            let mut send = |v: Var, grad: Vec<f64>| {
                if nodes[v.0].requires_grad {
                    pending[v.0].push(grad);
                }
            };
            let val = |v: Var| -> &[f64] { &nodes[v.0].value };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(idx, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|x| x * c).collect()),
                Op::AddScalar(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let (m, k) = as_matrix(&nodes[a.0].shape).unwrap();
                    let n = nodes[b.0].shape[1];
                    if nodes[a.0].requires_grad {
                        send(*a, matmul_a_bt(&g, val(*b), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, matmul_at_b(val(*a), &g, m, k, n));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = as_matrix(&nodes[a.0].shape).unwrap();
                    send(*a, transpose(&g, c, r));
                }
                Op::AddRow(a, v) | Op::MulRow(a, v) | Op::AddCol(a, v) | Op::MulCol(a, v) => {
                    let per_column = matches!(node.op, Op::AddRow(..) | Op::MulRow(..));
                    let multiplicative = matches!(node.op, Op::MulRow(..) | Op::MulCol(..));
                    let c = node.shape[1];
                    let (av, vv) = (val(*a), val(*v));
                    let key = |i: usize| if per_column { i % c } else { i / c };
                    if nodes[v.0].requires_grad {
                        let mut gv = vec![0.0; vv.len()];
                        for (i, gi) in g.iter().enumerate() {
                            gv[key(i)] += if multiplicative { gi * av[i] } else { *gi };
                        }
                        send(*v, gv);
                    }
                    if multiplicative {
                        send(*a, g.iter().enumerate().map(|(i, gi)| gi * vv[key(i)]).collect());
                    } else {
                        send(*a, g);
                    }
                }
                Op::ScaleBy(a, s) => {
                    let k = val(*s)[0];
                    if nodes[s.0].requires_grad {
                        let gs = g.iter().zip(val(*a)).fold(0.0, |acc, (x, y)| acc + x * y);
                        send(*s, vec![gs]);
                    }
                    send(*a, g.iter().map(|x| x * k).collect());
                }
                Op::ShiftBy(a, s) => {
                    if nodes[s.0].requires_grad {
                        send(*s, vec![g.iter().fold(0.0, |acc, x| acc + x)]);
                    }
                    send(*a, g);
                }
                Op::RowMean(a) => {
                    let (_, c) = last_dim_rows(&nodes[a.0].shape);
                    let ga = (0..nodes[a.0].value.len()).map(|i| g[i / c] / c as f64).collect();
                    send(*a, ga);
                }
                Op::RowVar(a) => {
                    let (_, c) = last_dim_rows(&nodes[a.0].shape);
                    let av = val(*a);
                    let mut ga = vec![0.0; av.len()];
                    for (r, row) in av.chunks(c).enumerate() {
                        let mu = row.iter().fold(0.0, |s, x| s + x) / c as f64;
                        for (j, x) in row.iter().enumerate() {
                            ga[r * c + j] = g[r] * 2.0 * (x - mu) / c as f64;
                        }
                    }
                    send(*a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    send(*a, g.iter().zip(y.iter()).map(|(gi, yi)| gi / (2.0 * yi)).collect());
                }
                Op::Recip(a) => {
                    let y = &node.value;
                    send(*a, g.iter().zip(y.iter()).map(|(gi, yi)| -gi * yi * yi).collect());
                }
                Op::Gelu(a) => {
                    send(*a, g.iter().zip(val(*a)).map(|(gi, x)| gi * gelu_grad(*x)).collect());
                }
                Op::Softmax(a) => {
                    let (_, c) = last_dim_rows(&node.shape);
                    let y = &node.value;
                    let mut ga = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot = gr.iter().zip(yr).fold(0.0, |s, (p, q)| s + p * q);
                        for j in 0..c {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::Sum(a) => send(*a, vec![g[0]; nodes[a.0].value.len()]),
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::SliceCols { src, start } => {
                    let (r, c) = as_matrix(&nodes[src.0].shape).unwrap();
                    let len = node.shape[1];
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    send(*src, ga);
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].shape[1];
                        if nodes[p.0].requires_grad {
                            let mut gp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            send(*p, gp);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let c = node.shape[1];
                    let mut gt = vec![0.0; nodes[table.0].value.len()];
                    for (k, &row) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[row * c + j] += g[k * c + j];
                        }
                    }
                    send(*table, gt);
                }
                Op::Reshape(a) => send(*a, g),
                Op::DirectSum(blocks) => {
                    let total = node.shape[0];
                    let mut offset = 0;
                    for b in blocks {
                        let s = nodes[b.0].shape[0];
                        if nodes[b.0].requires_grad {
                            let mut gb = Vec::with_capacity(s * s);
                            for i in 0..s {
                                let start = (offset + i) * total + offset;
                                gb.extend_from_slice(&g[start..start + s]);
                            }
                            send(*b, gb);
                        }
                        offset += s;
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let mut p = val(*logits).to_vec();
                    softmax_in_place(&mut p);
                    p[*target] -= 1.0;
                    send(*logits, p.into_iter().map(|x| x * g[0]).collect());
                }
                Op::SquaredError { pred, target } => {
                    let d = val(*pred)[0] - target;
                    send(*pred, vec![2.0 * d * g[0]]);
                }
            }
        }

        let mut params = BTreeMap::new();
        let mut touched_rows = BTreeMap::new();
        let touched = self.touched_rows.borrow();
        for (id, v) in self.param_vars.borrow().iter() {
            if let Some(g) = leaves.get(&v.0) {
                params.insert(*id, g.clone());
                if let Some(rows) = touched.get(&v.0) {
                    touched_rows.insert(*id, rows.clone());
                }
            }
        }
        Ok(Gradients {
            leaves,
            params,
            touched_rows,
        })
    }
}
