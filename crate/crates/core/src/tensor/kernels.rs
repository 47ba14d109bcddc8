// Row-major kernels. Every reduction runs left to right over the inner index
// so results are reproducible bit for bit.

/// `[m×k] · [k×n]`.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m×n] · [k×n]ᵀ` → `[m×k]`.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `[m×k]ᵀ · [m×n]` → `[k×n]`.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax of one slice with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Order-independent elementwise sum of gradient contributions.
///
/// Two parts are added directly (floating-point addition commutes); three or
/// more are sorted per element before a left-to-right sum, so the result does
/// not depend on the order in which the contributions were recorded.
pub(crate) fn canonical_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts.pop().unwrap(),
        2 => {
            let b = parts.pop().unwrap();
            let mut a = parts.pop().unwrap();
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        }
        k => {
            let n = parts[0].len();
            let mut out = vec![0.0; n];
            let mut column = Vec::with_capacity(k);
            for (i, o) in out.iter_mut().enumerate() {
                column.clear();
                column.extend(parts.iter().map(|p| p[i]));
                column.sort_by(f64::total_cmp);
                *o = column.iter().fold(0.0, |acc, v| acc + v);
            }
            out
        }
    }
}
