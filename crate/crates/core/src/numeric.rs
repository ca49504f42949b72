//! Small dense-matrix kernels shared across modules.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Numerically stable `log Σ exp(x)`. Returns `-inf` for an empty or all `-inf` input.
pub fn logsumexp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let max = iter.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = iter.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Inner product with a fixed left-to-right summation order.
#[inline]
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Row-wise softmax of `logits * scale`.
pub fn row_softmax(logits: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut dst) in logits.outer_iter().zip(out.outer_iter_mut()) {
        let lse = logsumexp(row.iter().map(|&s| s * scale));
        for (d, &s) in dst.iter_mut().zip(row.iter()) {
            *d = (s * scale - lse).exp();
        }
    }
    out
}

/// Column sums with a fixed (row-major, top-to-bottom) accumulation order.
pub fn column_sums(m: ArrayView2<f64>) -> Array1<f64> {
    let mut sums = Array1::zeros(m.ncols());
    for row in m.axis_iter(Axis(0)) {
        sums += &row;
    }
    sums
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
