//! Diagnostics: covariance similarity between tasks, score dispersion and
//! parameter accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::rng_from_seed;
use crate::model::{AttentionVariant, CaMtlModel, ConditionalAttentionSite, NormSite};
use crate::params::{ParamId, ParamStore};

/// Default share of the singular-value spectrum kept by [`rank_truncation`].
pub const SPECTRUM_FRACTION: f64 = 0.99;

/// Off-diagonal Frobenius mass, relative to the whole matrix, at which
/// [`symmetric_eigen`] stops.
pub const JACOBI_TOLERANCE: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("matrix has no spectral mass")]
    ZeroSpectrum,
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("malformed matrix: {0}")]
    Shape(String),
    #[error("need at least {needed} entries, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(AnalysisError::Shape(format!(
                "{rows}x{cols} matrix with {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AnalysisError::Shape("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut g = Matrix::zeros(d, d);
        for row in self.data.chunks(d) {
            for i in 0..d {
                if row[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    g.data[i * d + j] += row[i] * row[j];
                }
            }
        }
        g
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
/// `vectors` holds one eigenvector per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn symmetric_eigen(a: &Matrix) -> Result<Eigen> {
    let n = a.rows;
    if a.cols != n {
        return Err(AnalysisError::Shape(format!("{}x{} is not square", a.rows, a.cols)));
    }
    if a.data.iter().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m.at(i, j) * m.at(i, j);
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > JACOBI_TOLERANCE * scale {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(AnalysisError::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.at(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.at(j, j).total_cmp(&m.at(i, i)));
    let values = order.iter().map(|&i| m.at(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, col, v.at(k, src));
        }
    }
    Ok(Eigen { values, vectors })
}

/// How many leading directions a truncation keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationRule {
    /// Smallest rank whose singular values sum to the fraction of the total.
    #[default]
    Mass,
    /// The fraction of the non-zero singular values, rounded up.
    Count,
}

/// Leading eigenpairs of `XᵀX`.
#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    /// `d × r`, orthonormal columns.
    pub basis: Matrix,
    /// The top `r` eigenvalues (squared singular values of `X`).
    pub values: Vec<f64>,
    pub rank: usize,
}

impl Truncation {
    /// `U_r D_r^{1/2}`, a `d × r` factor of the truncated covariance.
    pub fn factor(&self) -> Matrix {
        let (d, r) = (self.basis.rows, self.rank);
        let mut f = Matrix::zeros(d, r);
        for k in 0..d {
            for c in 0..r {
                f.set(k, c, self.basis.at(k, c) * self.values[c].sqrt());
            }
        }
        f
    }

    /// `U_r D_r U_rᵀ`.
    pub fn covariance(&self) -> Matrix {
        let f = self.factor();
        let d = f.rows;
        let mut c = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                c.set(i, j, (0..self.rank).map(|k| f.at(i, k) * f.at(j, k)).sum());
            }
        }
        c
    }
}

pub fn rank_truncation(x: &Matrix, rule: TruncationRule) -> Result<Truncation> {
    rank_truncation_with(x, rule, SPECTRUM_FRACTION)
}

pub fn rank_truncation_with(x: &Matrix, rule: TruncationRule, fraction: f64) -> Result<Truncation> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let eigen = symmetric_eigen(&x.gram())?;
    let top = eigen.values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(AnalysisError::ZeroSpectrum);
    }
    // Eigenvalues below roundoff of the largest one are numerically zero.
    let floor = top * 1e-12;
    let singular: Vec<f64> = eigen
        .values
        .iter()
        .map(|&l| if l > floor { l.sqrt() } else { 0.0 })
        .collect();
    let nonzero = singular.iter().filter(|&&s| s > 0.0).count();
    let rank = match rule {
        TruncationRule::Mass => {
            let total: f64 = singular.iter().sum();
            let target = fraction * total * (1.0 - 1e-12);
            let mut acc = 0.0;
            let mut r = 0;
            while r < nonzero && acc < target {
                acc += singular[r];
                r += 1;
            }
            r.max(1)
        }
        TruncationRule::Count => ((fraction * nonzero as f64 - 1e-9).ceil() as usize).clamp(1, nonzero),
    };
    let d = eigen.vectors.rows;
    let mut basis = Matrix::zeros(d, rank);
    for k in 0..d {
        for c in 0..rank {
            basis.set(k, c, eigen.vectors.at(k, c));
        }
    }
    Ok(Truncation {
        basis,
        values: eigen.values[..rank].to_vec(),
        rank,
    })
}

/// Which similarity score to compute between truncated covariances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSimForm {
    /// Cosine of the truncated covariances,
    /// `⟨C_i, C_j⟩_F / (‖C_i‖_F ‖C_j‖_F)` with `C = U_r D_r U_rᵀ`. Equals 1
    /// for identical inputs.
    #[default]
    Cosine,
    /// `‖A_iᵀ A_j‖_F / (‖A_i‖_F ‖A_j‖_F)` with `A = U_r D_r^{1/2}`. Its
    /// self-similarity is `‖D‖_F / tr D`, below 1 for rank above 1.
    FactorNorm,
}

fn cross_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    // ‖aᵀ b‖_F for a: d×r, b: d×s.
    let mut s = 0.0;
    for i in 0..a.cols {
        for j in 0..b.cols {
            let dot: f64 = (0..a.rows).map(|k| a.at(k, i) * b.at(k, j)).sum();
            s += dot * dot;
        }
    }
    s.sqrt()
}

pub fn covsim_truncated(ti: &Truncation, tj: &Truncation, form: CovSimForm) -> f64 {
    let (a, b) = (ti.factor(), tj.factor());
    match form {
        CovSimForm::FactorNorm => cross_frobenius(&a, &b) / (a.frobenius() * b.frobenius()),
        CovSimForm::Cosine => {
            // ⟨A Aᵀ, B Bᵀ⟩ = ‖Aᵀ B‖², ‖A Aᵀ‖ = ‖Aᵀ A‖.
            let cross = cross_frobenius(&a, &b);
            let v = cross * cross / (cross_frobenius(&a, &a) * cross_frobenius(&b, &b));
            v.min(1.0)
        }
    }
}

pub fn covsim(xi: &Matrix, xj: &Matrix, rule: TruncationRule, form: CovSimForm) -> Result<f64> {
    if xi.cols != xj.cols {
        return Err(AnalysisError::Shape(format!(
            "activation widths differ: {} vs {}",
            xi.cols, xj.cols
        )));
    }
    Ok(covsim_truncated(&rank_truncation(xi, rule)?, &rank_truncation(xj, rule)?, form))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovSimReport {
    pub tasks: Vec<String>,
    pub pairwise: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl CovSimReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (t, row) in self.tasks.iter().zip(&self.pairwise) {
            out.push_str(t);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise similarities of per-task activations and their per-task means.
pub fn covsim_report(samples: &[(String, Matrix)], rule: TruncationRule, form: CovSimForm) -> Result<CovSimReport> {
    let truncs = samples
        .iter()
        .map(|(_, x)| rank_truncation(x, rule))
        .collect::<Result<Vec<_>>>()?;
    let t = samples.len();
    if let Some((_, first)) = samples.first() {
        if let Some((_, bad)) = samples.iter().find(|(_, x)| x.cols != first.cols) {
            return Err(AnalysisError::Shape(format!(
                "activation widths differ: {} vs {}",
                first.cols, bad.cols
            )));
        }
    }
    let mut pairwise = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in i..t {
            let v = covsim_truncated(&truncs[i], &truncs[j], form);
            pairwise[i][j] = v;
            pairwise[j][i] = v;
        }
    }
    Ok(CovSimReport {
        tasks: samples.iter().map(|(n, _)| n.clone()).collect(),
        averaged: avg_covsim(&pairwise)?,
        ranks: truncs.iter().map(|tr| tr.rank).collect(),
        pairwise,
    })
}

/// Mean similarity of each task to every other task.
pub fn avg_covsim(pairwise: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = pairwise.len();
    if t < 2 {
        return Err(AnalysisError::TooFew { needed: 2, got: t });
    }
    if pairwise.iter().any(|r| r.len() != t) {
        return Err(AnalysisError::Shape("pairwise matrix is not square".into()));
    }
    Ok((0..t)
        .map(|i| (0..t).filter(|&j| j != i).map(|j| pairwise[i][j]).sum::<f64>() / (t - 1) as f64)
        .collect())
}

/// Population standard deviation of per-task scores.
pub fn task_sigma(scores: &[f64]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(AnalysisError::TooFew {
            needed: 2,
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    Ok((scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCount {
    pub site: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    /// Embedding plus the plain encoder weights.
    pub base: usize,
    pub tasks: usize,
    /// `total / base`.
    pub total_ratio: f64,
    /// Percentage of `base` trained per task: `100 · trainable / (base · T)`.
    pub trained_per_task_pct: f64,
    pub sites: Vec<SiteCount>,
    pub task_embeddings: usize,
    pub heads: usize,
    /// Generator output size of a full-block site over a block-diagonal one.
    pub generator_ratio: f64,
    /// Base-block entries of a full-block site over a block-diagonal one.
    pub block_entry_ratio: f64,
}

fn count(store: &ParamStore, ids: impl IntoIterator<Item = ParamId>) -> usize {
    ids.into_iter().map(|id| store.get(id).numel()).sum()
}

/// Generator output dimension and base-block entries of an attention site
/// built from scratch.
fn attention_site_shape(variant: AttentionVariant, seq_len: usize, blocks: usize, embed_dim: usize) -> Option<(usize, usize)> {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(0);
    let site = ConditionalAttentionSite::new(&mut store, "probe", variant, seq_len, blocks, embed_dim, &mut rng).ok()?;
    Some((site.generator().output_dim(), count(&store, site.blocks().iter().copied())))
}

pub fn parameter_report(model: &CaMtlModel) -> ParameterReport {
    let store = model.store();
    let total = store.total_count();
    let trainable = store.trainable_count();
    let mut base = count(store, model.embedding_params());
    let mut sites = Vec::new();
    if let Some(a) = model.alignment() {
        let mut ids = vec![a.weight().base()];
        ids.extend(a.weight().generator().param_ids());
        sites.push(SiteCount {
            site: "alignment".into(),
            params: count(store, ids),
        });
    }
    for layer in model.layers() {
        let i = layer.index();
        base += count(store, layer.base_params());
        if let Some(site) = layer.attention() {
            sites.push(SiteCount {
                site: format!("layer{i}.attention"),
                params: site.param_count(),
            });
        }
        let (n1, n2) = layer.norms();
        let cln: usize = [n1, n2]
            .into_iter()
            .filter_map(|n| match n {
                NormSite::Conditional(c) => Some(c.generator().param_count()),
                NormSite::Plain(_) => None,
            })
            .sum();
        if cln > 0 {
            sites.push(SiteCount {
                site: format!("layer{i}.layer_norm"),
                params: cln,
            });
        }
        if let Some(b) = layer.bottleneck() {
            sites.push(SiteCount {
                site: format!("layer{i}.bottleneck"),
                params: bottleneck_count(store, b),
            });
        }
    }
    for (i, s) in model.skip_sites().iter().enumerate() {
        sites.push(SiteCount {
            site: format!("skip{i}"),
            params: bottleneck_count(store, s),
        });
    }
    let task_embeddings = count(store, [model.tasks().param()]);
    let heads = model.heads().iter().map(|h| h.param_count(store)).sum();
    let cfg = model.config();
    let blocks = model.resolved().blocks;
    let (generator_ratio, block_entry_ratio) = match (
        attention_site_shape(AttentionVariant::FullBlock, cfg.seq_len, blocks, cfg.d_model),
        attention_site_shape(AttentionVariant::BlockDiagonal, cfg.seq_len, blocks, cfg.d_model),
    ) {
        (Some((gf, ef)), Some((gb, eb))) => (gf as f64 / gb as f64, ef as f64 / eb as f64),
        _ => (f64::NAN, f64::NAN),
    };
    let tasks = model.tasks().len();
    ParameterReport {
        total,
        trainable,
        frozen: total - trainable,
        base,
        tasks,
        total_ratio: total as f64 / base as f64,
        trained_per_task_pct: 100.0 * trainable as f64 / (base as f64 * tasks.max(1) as f64),
        sites,
        task_embeddings,
        heads,
        generator_ratio,
        block_entry_ratio,
    }
}

fn bottleneck_count(store: &ParamStore, b: &crate::model::ConditionalBottleneckSite) -> usize {
    let (db, ub) = b.biases();
    let mut ids = vec![b.down().base(), b.up().base(), db, ub];
    ids.extend(b.down().generator().param_ids());
    ids.extend(b.up().generator().param_ids());
    if let Some(n) = b.norm() {
        ids.extend([n.inherited().gamma, n.inherited().beta]);
        ids.extend(n.generator().param_ids());
    }
    count(store, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::EmbeddingInit;
    use crate::model::{ModelConfig, TaskKind};

    #[test]
    fn eigen_of_diagonal_and_rotation() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigen(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12 && (e.values[1] - 1.0).abs() < 1e-12);
        let v0 = (e.vectors.at(0, 0), e.vectors.at(1, 0));
        assert!((v0.0.abs() - 0.5f64.sqrt()).abs() < 1e-12 && (v0.0 - v0.1).abs() < 1e-12);
        assert!(symmetric_eigen(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn truncation_examples() {
        let mut x = Matrix::zeros(5, 4);
        for r in 0..5 {
            x.set(r, 2, r as f64 + 1.0);
        }
        assert_eq!(rank_truncation(&x, TruncationRule::Mass).unwrap().rank, 1);
        let id = Matrix::identity(8);
        assert_eq!(rank_truncation(&id, TruncationRule::Mass).unwrap().rank, 8);
        let id = Matrix::identity(200);
        assert_eq!(rank_truncation(&id, TruncationRule::Mass).unwrap().rank, 198);
        assert_eq!(rank_truncation(&id, TruncationRule::Count).unwrap().rank, 198);
        assert_eq!(rank_truncation(&Matrix::zeros(3, 3), TruncationRule::Mass), Err(AnalysisError::ZeroSpectrum));
    }

    #[test]
    fn covsim_examples() {
        let xi = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let xj = Matrix::from_rows(&[vec![0.0, 3.0], vec![0.0, 1.0]]).unwrap();
        for form in [CovSimForm::Cosine, CovSimForm::FactorNorm] {
            assert!(covsim(&xi, &xj, TruncationRule::Mass, form).unwrap().abs() < 1e-9);
            assert!((covsim(&xi, &xi, TruncationRule::Mass, form).unwrap() - 1.0).abs() < 1e-9);
        }
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let literal = covsim(&x, &x, TruncationRule::Mass, CovSimForm::FactorNorm).unwrap();
        assert!((literal - 0.5f64.sqrt()).abs() < 1e-12, "‖D‖/tr D for D = I₂");
        assert_eq!(covsim(&x, &x, TruncationRule::Mass, CovSimForm::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn averages_and_sigma() {
        assert_eq!(avg_covsim(&[vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap(), vec![0.3, 0.3]);
        assert!(avg_covsim(&[vec![1.0]]).is_err());
        assert_eq!(task_sigma(&[7.0, 7.0, 7.0]).unwrap(), 0.0);
        assert_eq!(task_sigma(&[80.0, 90.0]).unwrap(), 5.0);
        assert!(task_sigma(&[1.0]).is_err());
    }

    fn model(cfg: ModelConfig) -> CaMtlModel {
        let tasks = vec![
            ("a".to_string(), TaskKind::Classification { classes: 2 }),
            ("b".to_string(), TaskKind::Classification { classes: 3 }),
        ];
        CaMtlModel::new(cfg, &tasks, 1).unwrap()
    }

    #[test]
    fn attention_variant_ratios() {
        let mut cfg = ModelConfig::camtl(8, 16, 2, 2, 10);
        cfg.blocks = Some(2);
        let r = parameter_report(&model(cfg));
        assert_eq!(r.generator_ratio, 4.0);
        assert_eq!(r.block_entry_ratio, 2.0);
    }

    #[test]
    fn parameter_counts() {
        let cfg = ModelConfig::camtl(4, 8, 4, 2, 10);
        let mut m = model(cfg);
        let before = parameter_report(&m);
        assert_eq!(before.frozen + before.trainable, before.total);
        let site_total: usize = before.sites.iter().map(|s| s.params).sum();
        assert_eq!(
            before.base + site_total + before.task_embeddings + before.heads,
            before.total
        );
        m.add_task("c", TaskKind::Classification { classes: 4 }, &EmbeddingInit::Random).unwrap();
        let after = parameter_report(&m);
        assert_eq!(after.total - before.total, 8 + 8 * 4 + 4);
        assert_eq!(after.task_embeddings - before.task_embeddings, 8);
        m.freeze_all();
        assert_eq!(parameter_report(&m).trainable, 0);
    }
}
