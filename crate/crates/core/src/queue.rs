//! FIFO queues of training queries and test-time normalization.
//!
//! At test time the real queries are unknown, so item biases are computed
//! from a rectangular `K × N` score matrix between the `K` most recent
//! training queries and the `N` test items. Text queues yield video biases
//! (text → video retrieval), video queues yield text biases.
//!
//! Queued vectors are snapshots taken at push time; they go stale as the
//! encoders keep training.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::emb1;
use crate::embed::{cosine_similarity_matrix, EmbeddingSet, Modality, SimilarityMatrix, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::numeric::dot;
use crate::sinkhorn::{add_biases, compute_biases_with_scaling, MarginalPrior, SinkhornOptions};

pub const DEFAULT_QUEUE_CAPACITY: usize = 16_384;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryQueue {
    modality: Modality,
    dim: usize,
    capacity: usize,
    buffer: VecDeque<Vec<f64>>,
    total_pushed: u64,
}

impl QueryQueue {
    pub fn new(modality: Modality, dim: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("capacity", "must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        Ok(Self {
            modality,
            dim,
            capacity,
            buffer: VecDeque::with_capacity(capacity.min(1 << 16)),
            total_pushed: 0,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    /// Appends a batch, evicting the oldest entries beyond capacity.
    pub fn push_batch(&mut self, batch: &EmbeddingSet) -> Result<()> {
        if batch.modality() != self.modality {
            return Err(Error::ModalityMismatch {
                expected: self.modality,
                actual: batch.modality(),
            });
        }
        self.push_vectors(batch.vectors())
    }

    /// Appends rows (possibly none). Rows must be unit norm.
    pub fn push_vectors(&mut self, rows: ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.dim && rows.nrows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: rows.ncols(),
            });
        }
        for (i, row) in rows.outer_iter().enumerate() {
            let norm = dot(row, row).sqrt();
            if norm.is_nan() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotUnitNorm { row: i, norm });
            }
        }
        for row in rows.outer_iter() {
            if self.buffer.len() == self.capacity {
                self.buffer.pop_front();
            }
            self.buffer.push_back(row.to_vec());
        }
        self.total_pushed += rows.nrows() as u64;
        Ok(())
    }

    /// Immutable copy of the whole queue, oldest first.
    pub fn snapshot(&self) -> Result<EmbeddingSet> {
        self.recent(self.len())
    }

    /// The `k` most recent entries (all of them if `k` exceeds the length),
    /// oldest first.
    pub fn recent(&self, k: usize) -> Result<EmbeddingSet> {
        let k = k.min(self.len());
        if k == 0 {
            return Err(Error::EmptyQueue);
        }
        let start = self.len() - k;
        let mut data = Vec::with_capacity(k * self.dim);
        for row in self.buffer.range(start..) {
            data.extend_from_slice(row);
        }
        let vectors = Array2::from_shape_vec((k, self.dim), data).expect("rows have queue dim");
        EmbeddingSet::new(self.modality, vectors)
    }

    /// EMB1 block of the contents followed by a `u32` little-endian capacity.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut vectors = Array2::zeros((self.len(), self.dim));
        for (mut dst, src) in vectors.outer_iter_mut().zip(&self.buffer) {
            dst.assign(&ndarray::ArrayView1::from(src.as_slice()));
        }
        emb1::write_block(w, self.modality, vectors.view())?;
        let cap = u32::try_from(self.capacity)
            .map_err(|_| Error::Format(format!("capacity {} exceeds u32", self.capacity)))?;
        w.write_all(&cap.to_le_bytes())?;
        Ok(())
    }

    /// Restores a queue written by [`QueryQueue::write_to`]. The push counter
    /// restarts at the restored length.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let block = emb1::read_block(r)?;
        let mut footer = [0u8; 4];
        r.read_exact(&mut footer).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("missing queue capacity footer".into()),
            _ => Error::Io(e),
        })?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after queue footer".into()));
        }
        let capacity = u32::from_le_bytes(footer) as usize;
        if block.vectors.nrows() > capacity {
            return Err(Error::Format(format!(
                "queue holds {} entries but capacity is {capacity}",
                block.vectors.nrows()
            )));
        }
        let mut queue = Self::new(block.modality, block.vectors.ncols(), capacity)?;
        // f32 storage keeps rows within the unit-norm tolerance.
        queue.push_vectors(block.vectors.view())?;
        Ok(queue)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Item-side biases computed from a set of (pseudo) queries.
#[derive(Debug, Clone, PartialEq)]
pub struct TestTimeBiases {
    pub item_biases: Array1<f64>,
    pub gamma: f64,
    pub queue_size_used: usize,
    pub residual: f64,
    pub iterations_run: usize,
    /// Similarity entries evaluated (`K·N`).
    pub similarity_entries: u64,
    /// Kernel entries touched by the scaling.
    pub scaling_work: u64,
    /// Set when the queue was not yet full.
    pub warning: Option<String>,
}

/// Biases for `test_items` from the queue contents (uniform prior, `r_i = 1/K`,
/// `c_j = 1/N`). The query-side scaling is discarded.
pub fn test_time_biases(
    queue: &QueryQueue,
    test_items: &EmbeddingSet,
    gamma: f64,
    opts: &SinkhornOptions,
) -> Result<TestTimeBiases> {
    if queue.is_empty() {
        return Err(Error::EmptyQueue);
    }
    if queue.dim() != test_items.dim() {
        return Err(Error::DimensionMismatch {
            expected: queue.dim(),
            actual: test_items.dim(),
        });
    }
    let mut out = biases_from_queries(&queue.snapshot()?, test_items, gamma, opts)?;
    if queue.len() < queue.capacity() {
        out.warning = Some(format!(
            "query queue holds {} of {} entries",
            queue.len(),
            queue.capacity()
        ));
    }
    Ok(out)
}

/// Item biases from an explicit query set; the core of [`test_time_biases`].
pub fn biases_from_queries(
    queries: &EmbeddingSet,
    items: &EmbeddingSet,
    gamma: f64,
    opts: &SinkhornOptions,
) -> Result<TestTimeBiases> {
    let pseudo = cosine_similarity_matrix(queries, items)?;
    let (k, n) = (pseudo.rows(), pseudo.cols());
    let prior = MarginalPrior::uniform(k, n)?;
    let (biases, scaling) = compute_biases_with_scaling(&pseudo, gamma, &prior, opts)?;
    Ok(TestTimeBiases {
        item_biases: biases.b,
        gamma,
        queue_size_used: k,
        residual: scaling.residual,
        iterations_run: scaling.iterations_run,
        similarity_entries: (k * n) as u64,
        scaling_work: scaling.work,
        warning: None,
    })
}

/// `S*[i][j] = ã_i + b̃_j + S[i][j]` for a text × video test matrix, with
/// `b̃` from the text-query side and `ã` from the video-query side.
pub fn apply_test_biases(
    s_test: &SimilarityMatrix,
    t2v_biases: &TestTimeBiases,
    v2t_biases: &TestTimeBiases,
) -> Result<SimilarityMatrix> {
    add_biases(s_test, v2t_biases.item_biases.view(), t2v_biases.item_biases.view())
}

/// Oracle normalization: the test queries themselves stand in for the queue.
/// Returns `(t2v, v2t)` biases computed exactly as the queue path would.
pub fn oracle_biases(
    text: &EmbeddingSet,
    video: &EmbeddingSet,
    gamma: f64,
    opts: &SinkhornOptions,
) -> Result<(TestTimeBiases, TestTimeBiases)> {
    let t2v = biases_from_queries(text, video, gamma, opts)?;
    let v2t = biases_from_queries(video, text, gamma, opts)?;
    Ok((t2v, v2t))
}
