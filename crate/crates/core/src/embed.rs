//! Embedding containers, unit normalization and cosine-similarity matrices.
//!
//! Vectors are held as `f64` rows; the on-disk EMB1 format (see [`crate::emb1`])
//! stores `f32`. Instance ids are dense `0..N` unless supplied explicitly.

use std::collections::HashSet;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::dot;

/// Row norms below this are treated as zero vectors.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Tolerance used when checking that stored vectors lie on the unit sphere.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Video,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Video => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Text),
            1 => Some(Modality::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("text"),
            Modality::Video => f.write_str("video"),
        }
    }
}

/// A modality-tagged set of `N` embedding vectors of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    modality: Modality,
    vectors: Array2<f64>,
    ids: Vec<usize>,
}

impl EmbeddingSet {
    /// Wraps raw vectors without normalizing them. Requires `N ≥ 1`, `D ≥ 1`
    /// and finite entries.
    pub fn new(modality: Modality, vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::Empty("embedding set has no rows"));
        }
        if vectors.ncols() == 0 {
            return Err(Error::Empty("embedding dimension is zero"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vectors"));
        }
        let ids = (0..vectors.nrows()).collect();
        Ok(Self {
            modality,
            vectors,
            ids,
        })
    }

    /// Replaces the default dense ids. Ids must be unique and one per row.
    pub fn with_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: ids.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Largest `| ‖row‖ − 1 |` over all rows.
    pub fn max_norm_deviation(&self) -> f64 {
        self.vectors
            .outer_iter()
            .map(|r| (dot(r, r).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_unit_norm(&self, tol: f64) -> bool {
        self.max_norm_deviation() <= tol
    }

    /// Returns the rows at `indices` (in that order), keeping their ids.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("selection is empty"));
        }
        let vectors = self.vectors.select(ndarray::Axis(0), indices);
        let ids = indices.iter().map(|&i| self.ids[i]).collect();
        Ok(Self {
            modality: self.modality,
            vectors,
            ids,
        })
    }
}

/// Scales every row of `raw` to unit Euclidean norm.
pub fn l2_normalize(raw: ArrayView2<f64>, modality: Modality) -> Result<EmbeddingSet> {
    let mut vectors = raw.to_owned();
    for (i, mut row) in vectors.outer_iter_mut().enumerate() {
        let norm = dot(row.view(), row.view()).sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding vectors"));
        }
        if norm < ZERO_NORM_THRESHOLD {
            return Err(Error::ZeroVector(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    EmbeddingSet::new(modality, vectors)
}

/// Dense `m × n` score matrix; rows are queries, columns are items.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    row_ids: Vec<usize>,
    col_ids: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        let row_ids = (0..values.nrows()).collect();
        let col_ids = (0..values.ncols()).collect();
        Self {
            values,
            row_ids,
            col_ids,
        }
    }

    pub fn with_ids(values: Array2<f64>, row_ids: Vec<usize>, col_ids: Vec<usize>) -> Result<Self> {
        if row_ids.len() != values.nrows() {
            return Err(Error::DimensionMismatch {
                expected: values.nrows(),
                actual: row_ids.len(),
            });
        }
        if col_ids.len() != values.ncols() {
            return Err(Error::DimensionMismatch {
                expected: values.ncols(),
                actual: col_ids.len(),
            });
        }
        Ok(Self {
            values,
            row_ids,
            col_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[usize] {
        &self.col_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// Swaps the query and item axes.
    pub fn transpose(&self) -> Self {
        Self {
            values: self.values.t().as_standard_layout().into_owned(),
            row_ids: self.col_ids.clone(),
            col_ids: self.row_ids.clone(),
        }
    }
}

/// `values[i][j] = ⟨queries_i, items_j⟩`. Rows are computed in parallel, each
/// with a fixed summation order, so the result does not depend on thread count.
pub fn cosine_similarity_matrix(
    queries: &EmbeddingSet,
    items: &EmbeddingSet,
) -> Result<SimilarityMatrix> {
    if queries.dim() != items.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            actual: items.dim(),
        });
    }
    let values = inner_products(queries.vectors(), items.vectors());
    SimilarityMatrix::with_ids(values, queries.ids().to_vec(), items.ids().to_vec())
}

/// Dense `A Bᵀ` over rows, parallel over rows of `a`.
pub(crate) fn inner_products(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, n) = (a.nrows(), b.nrows());
    let mut data = vec![0.0; m * n];
    if n > 0 {
        data.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
            let qi = a.row(i);
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(qi, b.row(j));
            }
        });
    }
    Array2::from_shape_vec((m, n), data).expect("shape matches buffer")
}
