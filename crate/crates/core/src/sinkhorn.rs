//! Sinkhorn-Knopp matrix scaling and the instance biases derived from it.
//!
//! Given scores `S` and temperature `γ`, the kernel `M = exp(S/γ)` is scaled to
//! `P = diag(α) M diag(β)` whose row sums approach `r` and column sums approach
//! `c`. The normalized logs of the scaling vectors, times `γ`, are additive
//! per-query (`a`) and per-item (`b`) biases; adding them to `S` makes every
//! instance's summed retrieval probability match its prior mass.
//!
//! The iteration starts from `β = 1 / colsum(M)` and alternates
//! `α ← r / (M β)`, `β ← c / (Mᵀ α)`. By default it runs in the log domain so
//! small temperatures cannot overflow.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rayon::prelude::*;

use crate::embed::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numeric::logsumexp;

/// Tolerance on the sum of each prior vector.
pub const PRIOR_SUM_TOL: f64 = 1e-9;

/// Matrices with at least this many entries use row-parallel reductions.
const PARALLEL_THRESHOLD: usize = 1 << 14;

/// Target row (`r`, queries) and column (`c`, items) marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    r: Vec<f64>,
    c: Vec<f64>,
}

impl MarginalPrior {
    pub fn new(r: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        check_simplex(&r, "r")?;
        check_simplex(&c, "c")?;
        Ok(Self { r, c })
    }

    /// `r_i = 1/m`, `c_j = 1/n`.
    pub fn uniform(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidPrior(format!("empty prior ({m}×{n})")));
        }
        Ok(Self {
            r: vec![1.0 / m as f64; m],
            c: vec![1.0 / n as f64; n],
        })
    }

    /// Normalizes arbitrary strictly positive weights onto the simplex.
    pub fn from_weights(row_weights: &[f64], col_weights: &[f64]) -> Result<Self> {
        Self::new(normalize_weights(row_weights, "r")?, normalize_weights(col_weights, "c")?)
    }

    /// Uniform query marginals and item marginals proportional to the number of
    /// queries matching each item (multi-caption datasets).
    pub fn from_item_counts(n_queries: usize, counts: &[f64]) -> Result<Self> {
        if n_queries == 0 {
            return Err(Error::InvalidPrior("no queries".into()));
        }
        Self::new(vec![1.0 / n_queries as f64; n_queries], normalize_weights(counts, "c")?)
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn rows(&self) -> usize {
        self.r.len()
    }

    pub fn cols(&self) -> usize {
        self.c.len()
    }

    /// The prior with the query and item axes swapped.
    pub fn transposed(&self) -> Self {
        Self {
            r: self.c.clone(),
            c: self.r.clone(),
        }
    }
}

fn check_simplex(v: &[f64], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidPrior(format!("{name} is empty")));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::InvalidPrior(format!(
            "{name}[{i}] = {x} is not strictly positive"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > PRIOR_SUM_TOL {
        return Err(Error::InvalidPrior(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

fn normalize_weights(w: &[f64], name: &str) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidPrior(format!("{name} is empty")));
    }
    if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::InvalidPrior(format!(
            "{name} weight {i} = {x} is not strictly positive"
        )));
    }
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    /// Iterations to run when `tol` is unset.
    pub n_iters: usize,
    /// When set, iterate until the residual drops to `tol` (at most `max_iters_cap` times).
    pub tol: Option<f64>,
    pub log_domain: bool,
    pub max_iters_cap: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            n_iters: 4,
            tol: None,
            log_domain: true,
            max_iters_cap: 10_000,
        }
    }
}

impl SinkhornOptions {
    pub fn fixed(n_iters: usize) -> Self {
        Self {
            n_iters,
            ..Self::default()
        }
    }

    /// Run to the given residual, capped at `max_iters_cap` iterations.
    pub fn until(tol: f64) -> Self {
        Self {
            tol: Some(tol),
            ..Self::default()
        }
    }

    pub fn linear_domain(mut self) -> Self {
        self.log_domain = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::param("n_iters", "must be at least 1"));
        }
        if self.max_iters_cap == 0 {
            return Err(Error::param("max_iters_cap", "must be at least 1"));
        }
        if let Some(tol) = self.tol {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::param("tol", format!("must be positive, got {tol}")));
            }
        }
        Ok(())
    }

    fn budget(&self) -> usize {
        match self.tol {
            Some(_) => self.max_iters_cap,
            None => self.n_iters.min(self.max_iters_cap),
        }
    }
}

/// Scaling vectors, kept in log form; `alpha()`/`beta()` exponentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVectors {
    pub log_alpha: Array1<f64>,
    pub log_beta: Array1<f64>,
    /// Max relative row-marginal deviation `|rowsum_i / r_i − 1|` after the
    /// last iteration. Columns are exact after each β half-step.
    pub residual: f64,
    pub iterations_run: usize,
    /// Residual after each iteration.
    pub residual_history: Vec<f64>,
    /// Kernel entries touched (one per entry per reduction pass).
    pub work: u64,
}

impl ScalingVectors {
    pub fn alpha(&self) -> Array1<f64> {
        self.log_alpha.mapv(f64::exp)
    }

    pub fn beta(&self) -> Array1<f64> {
        self.log_beta.mapv(f64::exp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub prior: MarginalPrior,
    pub residual: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.plan.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Array1<f64> {
        crate::numeric::column_sums(self.plan.view())
    }

    /// Largest absolute deviation of any row or column sum from its prior.
    pub fn max_marginal_error(&self) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(self.prior.r())
            .map(|(s, r)| (s - r).abs())
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(self.prior.c())
            .map(|(s, c)| (s - c).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }
}

/// Per-query (`a`) and per-item (`b`) additive score biases at temperature `gamma`.
///
/// `Σ_i exp(a_i/γ) = 1` and `Σ_j exp(b_j/γ) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVectors {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub gamma: f64,
}

impl BiasVectors {
    pub fn zeros(m: usize, n: usize, gamma: f64) -> Self {
        Self {
            a: Array1::zeros(m),
            b: Array1::zeros(n),
            gamma,
        }
    }
}

/// Scales a nonnegative matrix towards the marginals of `prior`.
pub fn scale_matrix(
    m: ArrayView2<f64>,
    prior: &MarginalPrior,
    opts: &SinkhornOptions,
) -> Result<(ScalingVectors, TransportPlan)> {
    opts.validate()?;
    check_shape(m.nrows(), m.ncols(), prior)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel matrix"));
    }
    if let Some((i, j)) = m.indexed_iter().find(|(_, v)| **v < 0.0).map(|(ix, _)| ix) {
        return Err(Error::param(
            "M",
            format!("entry ({i}, {j}) is negative; the kernel must be nonnegative"),
        ));
    }
    check_support(m, |v| v > 0.0)?;
    if opts.log_domain {
        let log_m = m.mapv(f64::ln);
        log_domain_core(log_m.view(), prior, opts)
    } else {
        linear_core(m, prior, opts)
    }
}

/// Scales `exp(log_m)` without forming the kernel. Entries may be `-inf`
/// (structural zeros) but not `+inf` or NaN.
pub fn scale_log_matrix(
    log_m: ArrayView2<f64>,
    prior: &MarginalPrior,
    opts: &SinkhornOptions,
) -> Result<(ScalingVectors, TransportPlan)> {
    opts.validate()?;
    check_shape(log_m.nrows(), log_m.ncols(), prior)?;
    if log_m.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("log kernel matrix"));
    }
    check_support(log_m, |v| v > f64::NEG_INFINITY)?;
    log_domain_core(log_m, prior, opts)
}

fn check_shape(m: usize, n: usize, prior: &MarginalPrior) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(Error::Empty("matrix to scale"));
    }
    if prior.rows() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: prior.rows(),
        });
    }
    if prior.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: prior.cols(),
        });
    }
    Ok(())
}

fn check_support(m: ArrayView2<f64>, positive: impl Fn(f64) -> bool) -> Result<()> {
    let mut col_ok = vec![false; m.ncols()];
    for (i, row) in m.outer_iter().enumerate() {
        let mut any = false;
        for (j, &v) in row.iter().enumerate() {
            if positive(v) {
                any = true;
                col_ok[j] = true;
            }
        }
        if !any {
            return Err(Error::DegenerateMatrix { axis: "row", index: i });
        }
    }
    if let Some(j) = col_ok.iter().position(|ok| !ok) {
        return Err(Error::DegenerateMatrix {
            axis: "column",
            index: j,
        });
    }
    Ok(())
}

/// `out_i = lse_j(log_m[i, j] + shift_j)` for every row.
fn row_lse(log_m: ArrayView2<f64>, shift: &Array1<f64>) -> Array1<f64> {
    let f = |row: ndarray::ArrayView1<f64>| {
        logsumexp(row.iter().zip(shift.iter()).map(|(&l, &s)| l + s))
    };
    if log_m.len() >= PARALLEL_THRESHOLD {
        let v: Vec<f64> = (0..log_m.nrows())
            .into_par_iter()
            .map(|i| f(log_m.row(i)))
            .collect();
        Array1::from(v)
    } else {
        log_m.outer_iter().map(f).collect()
    }
}

fn log_domain_core(
    log_m: ArrayView2<f64>,
    prior: &MarginalPrior,
    opts: &SinkhornOptions,
) -> Result<(ScalingVectors, TransportPlan)> {
    let (m, n) = log_m.dim();
    let entries = (m * n) as u64;
    let log_mt = log_m.t().as_standard_layout().into_owned();
    let log_r = Array1::from_iter(prior.r().iter().map(|x| x.ln()));
    let log_c = Array1::from_iter(prior.c().iter().map(|x| x.ln()));

    let mut work = 0u64;
    let mut log_beta = -row_lse(log_mt.view(), &Array1::zeros(m));
    let mut row = row_lse(log_m, &log_beta);
    work += 2 * entries;
    let mut log_alpha = Array1::zeros(m);
    let mut history = Vec::new();

    for _ in 0..opts.budget() {
        log_alpha = &log_r - &row;
        let col = row_lse(log_mt.view(), &log_alpha);
        log_beta = &log_c - &col;
        row = row_lse(log_m, &log_beta);
        work += 2 * entries;

        let residual = relative_row_residual(&log_alpha, &row, &log_r);
        if !residual.is_finite() || log_beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-domain scaling vectors"));
        }
        history.push(residual);
        if opts.tol.is_some_and(|tol| residual <= tol) {
            break;
        }
    }

    let mut plan = log_m.to_owned();
    Zip::indexed(&mut plan).for_each(|(i, j), v| {
        *v = (log_alpha[i] + *v + log_beta[j]).exp();
    });
    finish(log_alpha, log_beta, history, work, plan, prior)
}

fn relative_row_residual(log_alpha: &Array1<f64>, row_lse: &Array1<f64>, log_r: &Array1<f64>) -> f64 {
    log_alpha
        .iter()
        .zip(row_lse.iter())
        .zip(log_r.iter())
        .map(|((a, l), r)| (a + l - r).exp_m1().abs())
        .fold(0.0, f64::max)
}

fn linear_core(
    m: ArrayView2<f64>,
    prior: &MarginalPrior,
    opts: &SinkhornOptions,
) -> Result<(ScalingVectors, TransportPlan)> {
    let (rows, cols) = m.dim();
    let entries = (rows * cols) as u64;
    let r = Array1::from(prior.r().to_vec());
    let c = Array1::from(prior.c().to_vec());

    let mut work = entries;
    let mut beta = crate::numeric::column_sums(m).mapv(|s| 1.0 / s);
    let mut alpha = Array1::zeros(rows);
    let mut history = Vec::new();
    let mut m_beta = m.dot(&beta);
    work += entries;

    for _ in 0..opts.budget() {
        alpha = &r / &m_beta;
        let alpha_m = m.t().dot(&alpha);
        beta = &c / &alpha_m;
        m_beta = m.dot(&beta);
        work += 2 * entries;

        if alpha.iter().chain(beta.iter()).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::NonFinite("scaling vectors"));
        }
        let residual = alpha
            .iter()
            .zip(m_beta.iter())
            .zip(r.iter())
            .map(|((a, mb), ri)| (a * mb / ri - 1.0).abs())
            .fold(0.0, f64::max);
        history.push(residual);
        if opts.tol.is_some_and(|tol| residual <= tol) {
            break;
        }
    }

    let mut plan = m.to_owned();
    Zip::indexed(&mut plan).for_each(|(i, j), v| *v *= alpha[i] * beta[j]);
    finish(alpha.mapv(f64::ln), beta.mapv(f64::ln), history, work, plan, prior)
}

fn finish(
    log_alpha: Array1<f64>,
    log_beta: Array1<f64>,
    history: Vec<f64>,
    work: u64,
    plan: Array2<f64>,
    prior: &MarginalPrior,
) -> Result<(ScalingVectors, TransportPlan)> {
    let residual = history.last().copied().unwrap_or(f64::INFINITY);
    let scaling = ScalingVectors {
        log_alpha,
        log_beta,
        residual,
        iterations_run: history.len(),
        residual_history: history,
        work,
    };
    let plan = TransportPlan {
        plan,
        prior: prior.clone(),
        residual,
    };
    Ok((scaling, plan))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::param("gamma", format!("must be positive and finite, got {gamma}")));
    }
    Ok(())
}

/// Optimal biases for `S` at temperature `gamma`:
/// `a_i = γ log(α_i / Σα)`, `b_j = γ log(β_j / Σβ)` for the scaling of `exp(S/γ)`.
pub fn compute_biases(
    s: &SimilarityMatrix,
    gamma: f64,
    prior: &MarginalPrior,
    opts: &SinkhornOptions,
) -> Result<BiasVectors> {
    compute_biases_with_scaling(s, gamma, prior, opts).map(|(b, _)| b)
}

/// Like [`compute_biases`], also returning the raw scaling vectors and residual.
pub fn compute_biases_with_scaling(
    s: &SimilarityMatrix,
    gamma: f64,
    prior: &MarginalPrior,
    opts: &SinkhornOptions,
) -> Result<(BiasVectors, ScalingVectors)> {
    check_gamma(gamma)?;
    let logits = s.values().mapv(|v| v / gamma);
    let (scaling, _) = if opts.log_domain {
        scale_log_matrix(logits.view(), prior, opts)?
    } else {
        let kernel = logits.mapv(f64::exp);
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exp(S/gamma) overflows; use the log domain"));
        }
        scale_matrix(kernel.view(), prior, opts)?
    };
    let a = normalized_log(&scaling.log_alpha).mapv(|v| gamma * v);
    let b = normalized_log(&scaling.log_beta).mapv(|v| gamma * v);
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("biases"));
    }
    Ok((BiasVectors { a, b, gamma }, scaling))
}

/// `log(x_i / Σ x)` from `log x`.
fn normalized_log(log_x: &Array1<f64>) -> Array1<f64> {
    let lse = logsumexp(log_x.iter().copied());
    log_x.mapv(|v| v - lse)
}

/// `S*[i][j] = a[i] + b[j] + S[i][j]`.
pub fn adjust_similarity(s: &SimilarityMatrix, biases: &BiasVectors) -> Result<SimilarityMatrix> {
    add_biases(s, biases.a.view(), biases.b.view())
}

pub(crate) fn add_biases(
    s: &SimilarityMatrix,
    a: ndarray::ArrayView1<f64>,
    b: ndarray::ArrayView1<f64>,
) -> Result<SimilarityMatrix> {
    if a.len() != s.rows() {
        return Err(Error::DimensionMismatch {
            expected: s.rows(),
            actual: a.len(),
        });
    }
    if b.len() != s.cols() {
        return Err(Error::DimensionMismatch {
            expected: s.cols(),
            actual: b.len(),
        });
    }
    let mut values = s.values().to_owned();
    Zip::indexed(&mut values).for_each(|(i, j), v| *v += a[i] + b[j]);
    SimilarityMatrix::with_ids(values, s.row_ids().to_vec(), s.col_ids().to_vec())
}

/// Max deviation of each instance's summed retrieval probability from its target.
///
/// Query→item: the distribution is the row softmax of `S*/γ`; each query is
/// weighted by `m·r_i` and item `j` should receive `m·c_j`. Item→query is the
/// same on the transpose with the roles of `r` and `c` swapped. With a uniform
/// prior on a square matrix every weight and target is 1.
///
/// Returns `(t2v_error, v2t_error)` where rows of `S*` are text queries.
pub fn verify_normalization(
    s_star: &SimilarityMatrix,
    gamma: f64,
    prior: &MarginalPrior,
) -> Result<(f64, f64)> {
    let (t2v, v2t) = normalization_deviations(s_star, gamma, prior)?;
    let max = |d: &Array1<f64>| d.iter().copied().fold(0.0, f64::max);
    Ok((max(&t2v), max(&v2t)))
}

/// Per-instance absolute deviations behind [`verify_normalization`]:
/// one entry per item (columns) for t2v and per query (rows) for v2t.
/// Their means are the usual normalization errors.
pub fn normalization_deviations(
    s_star: &SimilarityMatrix,
    gamma: f64,
    prior: &MarginalPrior,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_gamma(gamma)?;
    check_shape(s_star.rows(), s_star.cols(), prior)?;
    let t2v = weighted_sum_deviations(s_star.values(), gamma, prior.r(), prior.c());
    let st = s_star.values().t().as_standard_layout().into_owned();
    let v2t = weighted_sum_deviations(st.view(), gamma, prior.c(), prior.r());
    Ok((t2v, v2t))
}

fn weighted_sum_deviations(s: ArrayView2<f64>, gamma: f64, r: &[f64], c: &[f64]) -> Array1<f64> {
    let m = s.nrows() as f64;
    let p = crate::numeric::row_softmax(s, 1.0 / gamma);
    let mut sums = vec![0.0; s.ncols()];
    for (row, &ri) in p.outer_iter().zip(r) {
        let w = m * ri;
        for (acc, &v) in sums.iter_mut().zip(row.iter()) {
            *acc += w * v;
        }
    }
    sums.iter().zip(c).map(|(sum, cj)| (sum - m * cj).abs()).collect()
}
