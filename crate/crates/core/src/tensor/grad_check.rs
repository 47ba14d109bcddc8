//! Central finite-difference checks for tape gradients.

use super::{Result, Tape, Tensor, TensorError, Var};
use crate::params::{ParamId, ParamStore};

/// Added to the denominator of the relative error.
pub const FD_EPSILON: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + FD_EPSILON)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape<'_>, Var) -> Result<Var>,
{
    let tape = Tape::inference();
    let v = tape.leaf(x.clone());
    let out = f(&tape, v)?;
    tape.scalar(out)
}

/// Maximum over coordinates of `|analytic - central| / (|central| + 1e-8)`
/// for a scalar-valued `f` evaluated at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape<'_>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::invalid("finite_diff_check", "step must be positive"));
    }
    let first = eval_scalar(&f, x)?;
    let second = eval_scalar(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic ({first:e} vs {second:e})"
        )));
    }

    let analytic = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone().with_requires_grad(true));
        let out = f(&tape, v)?;
        let grads = tape.backward(out)?;
        grads
            .wrt(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check over parameters of a store: `f` builds the scalar loss on the
/// given tape. Every element of every listed parameter is perturbed.
pub fn finite_diff_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    f: F,
) -> Result<f64>
where
    F: for<'a> Fn(&Tape<'a>, &'a ParamStore) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::invalid("finite_diff_check", "step must be positive"));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let out = f(&tape, s)?;
        tape.scalar(out)
    };
    if eval(store)?.to_bits() != eval(store)?.to_bits() {
        return Err(TensorError::Oracle("function is not deterministic".into()));
    }

    let grads = {
        let tape = Tape::new();
        let out = f(&tape, store)?;
        tape.backward(out)?
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = grads
            .param(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}
