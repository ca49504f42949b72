//! Retrieval distributions, rank metrics and normalization diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2};

use crate::embed::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numeric::{column_sums, row_softmax};

/// Default evaluation temperature.
pub const DEFAULT_EVAL_GAMMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Text queries retrieve videos (rows of the text × video score matrix).
    T2V,
    /// Video queries retrieve texts (columns of the text × video score matrix).
    V2T,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2V => "t2v",
            Direction::V2T => "v2t",
        })
    }
}

/// Row-stochastic matrix: row `i` is the retrieval distribution of query `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDistribution {
    probs: Array2<f64>,
    direction: Direction,
    gamma: f64,
}

impl RetrievalDistribution {
    /// Wraps a precomputed row-stochastic matrix (rows must sum to 1 within 1e-9).
    pub fn from_probs(probs: Array2<f64>, direction: Direction, gamma: f64) -> Result<Self> {
        for (i, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::param(
                    "probs",
                    format!("row {i} is not a probability distribution"),
                ));
            }
        }
        Ok(Self {
            probs,
            direction,
            gamma,
        })
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_queries(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.probs.ncols()
    }

    /// `Σ_i P[i][j]` for every item `j`.
    pub fn item_sums(&self) -> Array1<f64> {
        column_sums(self.probs.view())
    }
}

/// Softmax of `S/γ` over items. For `V2T` the softmax runs over the columns of
/// `S` (video queries over text items) and the result is indexed `[video][text]`.
pub fn retrieval_distribution(
    s: &SimilarityMatrix,
    gamma: f64,
    direction: Direction,
) -> Result<RetrievalDistribution> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::param("gamma", format!("must be positive and finite, got {gamma}")));
    }
    let probs = match direction {
        Direction::T2V => row_softmax(s.values(), 1.0 / gamma),
        Direction::V2T => row_softmax(s.values().t(), 1.0 / gamma),
    };
    Ok(RetrievalDistribution {
        probs,
        direction,
        gamma,
    })
}

/// Mean over items of `|target − Σ_i P[i][j]|` with the default target `m/n`
/// (1 when queries and items are equally many).
pub fn normalization_error(p: &RetrievalDistribution) -> f64 {
    let target = p.n_queries() as f64 / p.n_items() as f64;
    let sums = p.item_sums();
    sums.iter().map(|s| (target - s).abs()).sum::<f64>() / sums.len() as f64
}

/// [`normalization_error`] with an explicit target mass per item.
pub fn normalization_error_with_targets(p: &RetrievalDistribution, targets: &[f64]) -> Result<f64> {
    if targets.len() != p.n_items() {
        return Err(Error::DimensionMismatch {
            expected: p.n_items(),
            actual: targets.len(),
        });
    }
    let sums = p.item_sums();
    Ok(sums
        .iter()
        .zip(targets)
        .map(|(s, t)| (t - s).abs())
        .sum::<f64>()
        / sums.len() as f64)
}

/// Correct items for each query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    relevant: Vec<Vec<usize>>,
    n_items: usize,
}

impl GroundTruth {
    pub fn new(relevant: Vec<Vec<usize>>, n_items: usize) -> Result<Self> {
        for (q, items) in relevant.iter().enumerate() {
            if items.is_empty() {
                return Err(Error::MissingGroundTruth(q));
            }
            if let Some(&item) = items.iter().find(|&&j| j >= n_items) {
                return Err(Error::GroundTruthOutOfRange {
                    query: q,
                    item,
                    n_items,
                });
            }
        }
        let relevant = relevant
            .into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Ok(Self { relevant, n_items })
    }

    /// Query `i` matches item `i`.
    pub fn diagonal(n: usize) -> Self {
        Self {
            relevant: (0..n).map(|i| vec![i]).collect(),
            n_items: n,
        }
    }

    /// Builds from `(query, item)` pairs; every query in `0..n_queries` needs one.
    pub fn from_pairs(n_queries: usize, n_items: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut relevant = vec![Vec::new(); n_queries];
        for &(q, item) in pairs {
            let slot = relevant.get_mut(q).ok_or(Error::GroundTruthOutOfRange {
                query: q,
                item,
                n_items,
            })?;
            slot.push(item);
        }
        Self::new(relevant, n_items)
    }

    pub fn n_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn relevant(&self, query: usize) -> &[usize] {
        &self.relevant[query]
    }

    pub fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.relevant[query].binary_search(&item).is_ok()
    }

    /// Number of queries matching each item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items];
        for items in &self.relevant {
            for &j in items {
                counts[j] += 1;
            }
        }
        counts
    }

    /// Item → query ground truth. Fails if some item has no matching query.
    pub fn transpose(&self) -> Result<Self> {
        let mut relevant = vec![Vec::new(); self.n_items];
        for (q, items) in self.relevant.iter().enumerate() {
            for &j in items {
                relevant[j].push(q);
            }
        }
        Self::new(relevant, self.relevant.len())
    }

    /// Expected summed retrieval mass of every item: `m · count_j / Σ count`.
    pub fn item_targets(&self) -> Vec<f64> {
        let counts = self.item_counts();
        let total: usize = counts.iter().sum();
        let m = self.relevant.len() as f64;
        counts.iter().map(|&c| m * c as f64 / total as f64).collect()
    }

    /// Expected summed mass of each query when items retrieve queries.
    fn query_targets(&self) -> Vec<f64> {
        let total: usize = self.relevant.iter().map(Vec::len).sum();
        let n = self.n_items as f64;
        self.relevant
            .iter()
            .map(|v| n * v.len() as f64 / total as f64)
            .collect()
    }
}

/// Position (1-based) of `item` in `row` sorted by descending score, ties
/// broken by ascending item index.
fn rank_of(row: ndarray::ArrayView1<f64>, item: usize) -> usize {
    let target = row[item];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(k, &v)| v > target || (v == target && k < item))
        .count()
}

/// Best rank of a correct item for every query (rows of `s`).
pub fn rank_matrix(s: &SimilarityMatrix, gt: &GroundTruth) -> Result<Vec<usize>> {
    if gt.n_items() != s.cols() {
        return Err(Error::DimensionMismatch {
            expected: s.cols(),
            actual: gt.n_items(),
        });
    }
    if gt.n_queries() < s.rows() {
        return Err(Error::MissingGroundTruth(gt.n_queries()));
    }
    if gt.n_queries() > s.rows() {
        return Err(Error::DimensionMismatch {
            expected: s.rows(),
            actual: gt.n_queries(),
        });
    }
    Ok(s.values()
        .outer_iter()
        .enumerate()
        .map(|(q, row)| {
            gt.relevant(q)
                .iter()
                .map(|&j| rank_of(row, j))
                .min()
                .expect("ground truth is non-empty")
        })
        .collect())
}

/// Index of the highest-scoring item (lowest index among ties).
pub(crate) fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub direction: Direction,
    pub gamma: f64,
    pub n_queries: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub t2v_norm_error: f64,
    pub v2t_norm_error: f64,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// `(name, value)` pairs in CSV column order.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("gamma".to_string(), self.gamma),
            ("n_queries".to_string(), self.n_queries as f64),
        ];
        out.extend(self.recall_at.iter().map(|(k, v)| (format!("R@{k}"), *v)));
        out.push(("MdR".into(), self.median_rank));
        out.push(("MnR".into(), self.mean_rank));
        out.push(("t2v_norm_error".into(), self.t2v_norm_error));
        out.push(("v2t_norm_error".into(), self.v2t_norm_error));
        out
    }

    /// One header row and one value row.
    pub fn to_csv(&self) -> String {
        let fields = self.fields();
        let mut s = String::from("direction");
        for (name, _) in &fields {
            write!(s, ",{name}").unwrap();
        }
        write!(s, "\n{}", self.direction).unwrap();
        for (_, v) in &fields {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
        s
    }
}

/// Metrics with the rows of `s` as queries (text → video by convention).
pub fn compute_metrics(
    s: &SimilarityMatrix,
    gt: &GroundTruth,
    gamma: f64,
    ks: &[usize],
) -> Result<MetricsReport> {
    let ranks = rank_matrix(s, gt)?;
    let t2v = retrieval_distribution(s, gamma, Direction::T2V)?;
    let v2t = retrieval_distribution(s, gamma, Direction::V2T)?;
    let t2v_norm_error = normalization_error_with_targets(&t2v, &gt.item_targets())?;
    let v2t_norm_error = normalization_error_with_targets(&v2t, &gt.query_targets())?;
    Ok(summarize(Direction::T2V, gamma, &ranks, ks, t2v_norm_error, v2t_norm_error))
}

/// Metrics for one retrieval direction of a text × video score matrix.
/// `gt` always maps text queries to video items; for `V2T` it is transposed.
/// The normalization errors keep their text/video meaning in both cases.
pub fn compute_metrics_directional(
    s: &SimilarityMatrix,
    gt: &GroundTruth,
    gamma: f64,
    ks: &[usize],
    direction: Direction,
) -> Result<MetricsReport> {
    match direction {
        Direction::T2V => compute_metrics(s, gt, gamma, ks),
        Direction::V2T => {
            let mut r = compute_metrics(&s.transpose(), &gt.transpose()?, gamma, ks)?;
            r.direction = Direction::V2T;
            std::mem::swap(&mut r.t2v_norm_error, &mut r.v2t_norm_error);
            Ok(r)
        }
    }
}

fn summarize(
    direction: Direction,
    gamma: f64,
    ranks: &[usize],
    ks: &[usize],
    t2v_norm_error: f64,
    v2t_norm_error: f64,
) -> MetricsReport {
    let n = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median_rank = sorted[(sorted.len() - 1) / 2] as f64;
    let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
    MetricsReport {
        direction,
        gamma,
        n_queries: ranks.len(),
        recall_at,
        median_rank,
        mean_rank,
        t2v_norm_error,
        v2t_norm_error,
    }
}

/// False negative / positive rates of items grouped by summed retrieval probability.
#[derive(Debug, Clone, PartialEq)]
pub struct FalseRateProfile {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub false_negative_rate: Vec<f64>,
    pub false_positive_rate: Vec<f64>,
}

impl FalseRateProfile {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Index of the bin holding `sum`; values past the last edge go to the last bin.
    pub fn bin_of(&self, sum: f64) -> usize {
        bin_index(&self.bin_edges, sum)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,fnr,fpr\n");
        for b in 0..self.n_bins() {
            writeln!(
                s,
                "{},{},{},{},{}",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.counts[b],
                self.false_negative_rate[b],
                self.false_positive_rate[b]
            )
            .unwrap();
        }
        s
    }
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    let n_bins = edges.len() - 1;
    edges[1..n_bins].iter().take_while(|&&e| v >= e).count()
}

/// `bins` equal-width bins over `[0, 2]`; items whose summed probability is
/// 2 or more fall in the last bin.
pub fn false_rate_profile(
    p: &RetrievalDistribution,
    gt: &GroundTruth,
    bins: usize,
) -> Result<FalseRateProfile> {
    if bins < 2 {
        return Err(Error::param("bins", format!("need at least 2, got {bins}")));
    }
    let edges = (0..=bins).map(|b| 2.0 * b as f64 / bins as f64).collect();
    false_rate_profile_with_edges(p, gt, edges)
}

/// Per bin, the false-negative rate is the share of (true query, item) pairs
/// whose query does not rank the item first, and the false-positive rate the
/// share of (non-matching query, item) pairs whose query ranks the item first.
pub fn false_rate_profile_with_edges(
    p: &RetrievalDistribution,
    gt: &GroundTruth,
    edges: Vec<f64>,
) -> Result<FalseRateProfile> {
    if edges.len() < 3 || edges.iter().any(|e| e.is_nan()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("bins", "edges must be increasing with at least 2 bins"));
    }
    if gt.n_queries() != p.n_queries() || gt.n_items() != p.n_items() {
        return Err(Error::DimensionMismatch {
            expected: p.n_queries(),
            actual: gt.n_queries(),
        });
    }
    let n_bins = edges.len() - 1;
    let top1: Vec<usize> = p.probs().outer_iter().map(argmax).collect();
    let sums = p.item_sums();
    let m = p.n_queries();

    let mut counts = vec![0usize; n_bins];
    let mut fn_hits = vec![0usize; n_bins];
    let mut fn_total = vec![0usize; n_bins];
    let mut fp_hits = vec![0usize; n_bins];
    let mut fp_total = vec![0usize; n_bins];
    let item_bins: Vec<usize> = sums.iter().map(|&s| bin_index(&edges, s)).collect();
    for &b in &item_bins {
        counts[b] += 1;
    }
    for (j, &b) in item_bins.iter().enumerate() {
        let mut true_queries = 0;
        for (q, &top) in top1.iter().enumerate() {
            if gt.is_relevant(q, j) {
                true_queries += 1;
                fn_total[b] += 1;
                if top != j {
                    fn_hits[b] += 1;
                }
            } else if top == j {
                fp_hits[b] += 1;
            }
        }
        fp_total[b] += m - true_queries;
    }
    let rate = |hits: &[usize], total: &[usize]| -> Vec<f64> {
        hits.iter()
            .zip(total)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect()
    };
    Ok(FalseRateProfile {
        false_negative_rate: rate(&fn_hits, &fn_total),
        false_positive_rate: rate(&fp_hits, &fp_total),
        bin_edges: edges,
        counts,
    })
}
