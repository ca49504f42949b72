//! # nclkit
//!
//! Normalized contrastive learning for embedding-based cross-modal retrieval.
//!
//! Contrastive training leaves some items over-represented (their summed
//! retrieval probability over all queries exceeds 1) and others
//! under-represented. This crate computes per-instance additive biases with
//! Sinkhorn-Knopp scaling so every item's summed probability matches its prior
//! mass, both on training batches and at test time, where the unknown test
//! queries are approximated by a FIFO queue of training queries.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`embed`] | embedding sets, unit normalization, cosine similarity |
//! | [`emb1`] | the EMB1 binary embedding file format |
//! | [`sinkhorn`] | matrix scaling, bias computation, normalization check |
//! | [`retrieval`] | retrieval distributions, R@K / MdR / MnR, false-rate profiles |
//! | [`loss`] | contrastive and normalized contrastive losses with gradients |
//! | [`queue`] | query queues and test-time normalization |
//! | [`decomposition`] | modal-mean decomposition diagnostics |
//! | [`synth`] | synthetic data and a small linear-encoder trainer |

pub mod decomposition;
pub mod emb1;
pub mod embed;
pub mod error;
pub mod loss;
pub mod numeric;
pub mod queue;
pub mod retrieval;
pub mod sinkhorn;
pub mod synth;

pub use embed::{cosine_similarity_matrix, l2_normalize, EmbeddingSet, Modality, SimilarityMatrix};
pub use error::{Error, Result};
pub use retrieval::{Direction, GroundTruth, MetricsReport};
pub use sinkhorn::{BiasVectors, MarginalPrior, SinkhornOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
