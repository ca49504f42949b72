//! Contrastive (CL) and normalized contrastive (NCL) losses with analytic
//! gradients, plus finite-difference checking.
//!
//! Both losses are the symmetric cross-entropy over a batch of `B` diagonal
//! pairs: `L = ½ (L_t2v + L_v2t)` on logits `sim/γ`. NCL adds the batch's
//! Sinkhorn biases to the similarities first; the biases are treated as
//! constants when differentiating. Gradients are Euclidean, taken with respect
//! to the raw embedding components.

use ndarray::{Array1, Array2, ArrayView2};

use crate::embed::{inner_products, EmbeddingSet, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::numeric::row_softmax;
use crate::retrieval::RetrievalDistribution;
use crate::sinkhorn::{compute_biases, BiasVectors, MarginalPrior, SinkhornOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub t2v: f64,
    pub v2t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_text: Array2<f64>,
    pub d_video: Array2<f64>,
}

impl GradientSet {
    pub fn is_finite(&self) -> bool {
        self.d_text.iter().chain(self.d_video.iter()).all(|v| v.is_finite())
    }
}

/// Symmetric cross-entropy of a square logit matrix with diagonal targets.
/// Returns the loss and `∂L/∂logits`.
pub fn symmetric_cross_entropy(logits: ArrayView2<f64>) -> (LossValue, Array2<f64>) {
    let b = logits.nrows();
    let bf = b as f64;
    let p = row_softmax(logits, 1.0);
    // q[j][i]: softmax over texts i for video query j
    let q = row_softmax(logits.t(), 1.0);
    let t2v = -(0..b).map(|i| p[[i, i]].ln()).sum::<f64>() / bf;
    let v2t = -(0..b).map(|j| q[[j, j]].ln()).sum::<f64>() / bf;

    let mut grad = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let target = if i == j { 1.0 } else { 0.0 };
            grad[[i, j]] = 0.5 * ((p[[i, j]] - target) + (q[[j, i]] - target)) / bf;
        }
    }
    let value = LossValue {
        total: 0.5 * (t2v + v2t),
        t2v,
        v2t,
    };
    (value, grad)
}

/// Loss and gradients on raw `B × D` text and video matrices, with optional
/// frozen biases added to the similarities.
pub fn frozen_bias_objective(
    text: ArrayView2<f64>,
    video: ArrayView2<f64>,
    gamma: f64,
    biases: Option<&BiasVectors>,
) -> (LossValue, GradientSet) {
    let mut logits = inner_products(text, video);
    if let Some(bv) = biases {
        for ((i, j), v) in logits.indexed_iter_mut() {
            *v += bv.a[i] + bv.b[j];
        }
    }
    logits.mapv_inplace(|v| v / gamma);
    let (value, d_logits) = symmetric_cross_entropy(logits.view());
    let d_sim = d_logits.mapv(|g| g / gamma);
    let d_text = d_sim.dot(&video);
    let d_video = d_sim.t().dot(&text);
    (value, GradientSet { d_text, d_video })
}

fn check_batch(text: &EmbeddingSet, video: &EmbeddingSet, gamma: f64) -> Result<()> {
    if text.len() != video.len() {
        return Err(Error::DimensionMismatch {
            expected: text.len(),
            actual: video.len(),
        });
    }
    if text.dim() != video.dim() {
        return Err(Error::DimensionMismatch {
            expected: text.dim(),
            actual: video.dim(),
        });
    }
    if text.len() < 2 {
        return Err(Error::BatchTooSmall(text.len()));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::param("gamma", format!("must be positive and finite, got {gamma}")));
    }
    Ok(())
}

/// Cross-modal contrastive loss of a batch whose `i`-th text and video match.
pub fn contrastive_loss(
    text: &EmbeddingSet,
    video: &EmbeddingSet,
    gamma: f64,
) -> Result<(LossValue, GradientSet)> {
    check_batch(text, video, gamma)?;
    Ok(frozen_bias_objective(text.vectors(), video.vectors(), gamma, None))
}

/// Normalized contrastive loss: the contrastive loss on `a_i + b_j + ⟨t_i, v_j⟩`
/// with batch biases from Sinkhorn scaling (uniform prior), held constant for
/// the gradient.
pub fn ncl_loss(
    text: &EmbeddingSet,
    video: &EmbeddingSet,
    gamma: f64,
    opts: &SinkhornOptions,
) -> Result<(LossValue, GradientSet, BiasVectors)> {
    check_batch(text, video, gamma)?;
    let b = text.len();
    let s = SimilarityMatrix::new(inner_products(text.vectors(), video.vectors()));
    let biases = compute_biases(&s, gamma, &MarginalPrior::uniform(b, b)?, opts)?;
    let (value, grads) =
        frozen_bias_objective(text.vectors(), video.vectors(), gamma, Some(&biases));
    Ok((value, grads, biases))
}

/// `∂L/∂b_j = −(1/2B)(1 − Σ_i P[i][j])` for an additive per-item logit bias
/// `b_j`, where `P` is the text-to-video distribution of a `B × B` batch.
/// For a bias in similarity units multiply by `1/γ`.
pub fn bias_gradient(p: &RetrievalDistribution) -> Array1<f64> {
    let b = p.n_queries() as f64;
    p.item_sums().mapv(|s| -(1.0 - s) / (2.0 * b))
}

/// Central-difference estimate of `∇f` at `params`.
pub fn numerical_gradient<F>(f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    (0..params.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + eps;
            let plus = f(&x);
            x[k] = orig - eps;
            let minus = f(&x);
            x[k] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Max over coordinates of `|numeric − analytic| / (|analytic| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    numerical_gradient(f, params, eps)
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{l2_normalize, Modality};
    use crate::retrieval::{retrieval_distribution, Direction};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize, modality: Modality) -> EmbeddingSet {
        let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        l2_normalize(raw.view(), modality).unwrap()
    }

    fn flatten(t: ArrayView2<f64>, v: ArrayView2<f64>) -> Vec<f64> {
        t.iter().chain(v.iter()).copied().collect()
    }

    fn split(x: &[f64], b: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
        let t = Array2::from_shape_vec((b, d), x[..b * d].to_vec()).unwrap();
        let v = Array2::from_shape_vec((b, d), x[b * d..].to_vec()).unwrap();
        (t, v)
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let t = EmbeddingSet::new(Modality::Text, Array2::eye(2)).unwrap();
        let v = EmbeddingSet::new(Modality::Video, Array2::eye(2)).unwrap();
        let (loss, _) = contrastive_loss(&t, &v, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss.t2v - expect).abs() < 1e-14);
        assert!((loss.v2t - expect).abs() < 1e-14);
        assert!((loss.total - expect).abs() < 1e-14);
        assert!((loss.total - 0.5 * (loss.t2v + loss.v2t)).abs() < 1e-12);
    }

    #[test]
    fn saturated_alignment_has_vanishing_loss() {
        let t = EmbeddingSet::new(Modality::Text, Array2::eye(4)).unwrap();
        let v = EmbeddingSet::new(Modality::Video, Array2::eye(4)).unwrap();
        let (loss, _) = contrastive_loss(&t, &v, 0.01).unwrap();
        assert!(loss.total < 1e-40);
    }

    #[test]
    fn batch_too_small() {
        let t = EmbeddingSet::new(Modality::Text, array![[1.0, 0.0]]).unwrap();
        assert!(matches!(contrastive_loss(&t, &t, 1.0), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn identical_embeddings_give_log_b() {
        let row = array![0.6, 0.8];
        let m = Array2::from_shape_fn((5, 2), |(_, d)| row[d]);
        let t = EmbeddingSet::new(Modality::Text, m.clone()).unwrap();
        let v = EmbeddingSet::new(Modality::Video, m).unwrap();
        let (ncl, _, biases) = ncl_loss(&t, &v, 0.05, &SinkhornOptions::default()).unwrap();
        let (cl, _) = contrastive_loss(&t, &v, 0.05).unwrap();
        let log_b = 5f64.ln();
        assert!((ncl.t2v - log_b).abs() < 1e-12 && (ncl.v2t - log_b).abs() < 1e-12);
        assert!((cl.total - ncl.total).abs() < 1e-12);
        for a in biases.a.iter() {
            assert!((a - 0.05 * (0.2f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn converged_ncl_loss_is_mean_neg_log_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_set(&mut rng, 6, 5, Modality::Text);
        let v = random_set(&mut rng, 6, 5, Modality::Video);
        let (loss, _, biases) = ncl_loss(&t, &v, 0.1, &SinkhornOptions::until(1e-12)).unwrap();
        let s = SimilarityMatrix::new(inner_products(t.vectors(), v.vectors()));
        let s_star = crate::sinkhorn::adjust_similarity(&s, &biases).unwrap();
        let p = retrieval_distribution(&s_star, 0.1, Direction::T2V).unwrap();
        for sum in p.item_sums() {
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let expect = -(0..6).map(|i| p.probs()[[i, i]].ln()).sum::<f64>() / 6.0;
        assert!((loss.t2v - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let (b, d) = (8, 16);
        for (seed, gamma) in [(1u64, 1.0), (2, 0.1), (3, 0.05)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_set(&mut rng, b, d, Modality::Text);
            let v = random_set(&mut rng, b, d, Modality::Video);
            let (_, g) = contrastive_loss(&t, &v, gamma).unwrap();
            assert!(g.is_finite());
            let x = flatten(t.vectors(), v.vectors());
            let analytic = flatten(g.d_text.view(), g.d_video.view());
            let f = |x: &[f64]| {
                let (t, v) = split(x, b, d);
                frozen_bias_objective(t.view(), v.view(), gamma, None).0.total
            };
            let err = finite_difference_check(f, &x, &analytic, 1e-5);
            assert!(err < 1e-5, "gamma {gamma}: rel err {err}");
        }
    }

    #[test]
    fn ncl_gradient_matches_frozen_bias_finite_differences() {
        let (b, d) = (8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = random_set(&mut rng, b, d, Modality::Text);
        let v = random_set(&mut rng, b, d, Modality::Video);
        let gamma = 0.1;
        let (_, g, biases) = ncl_loss(&t, &v, gamma, &SinkhornOptions::default()).unwrap();
        let x = flatten(t.vectors(), v.vectors());
        let analytic = flatten(g.d_text.view(), g.d_video.view());
        let f = |x: &[f64]| {
            let (t, v) = split(x, b, d);
            frozen_bias_objective(t.view(), v.view(), gamma, Some(&biases)).0.total
        };
        let err = finite_difference_check(f, &x, &analytic, 1e-5);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn bias_gradient_examples() {
        let u = RetrievalDistribution::from_probs(Array2::from_elem((3, 3), 1.0 / 3.0), Direction::T2V, 1.0)
            .unwrap();
        assert!(bias_gradient(&u).iter().all(|g| g.abs() < 1e-15));
        let p = RetrievalDistribution::from_probs(array![[1.0, 0.0], [1.0, 0.0]], Direction::T2V, 1.0).unwrap();
        assert_eq!(bias_gradient(&p), array![0.25, -0.25]);
    }

    #[test]
    fn bias_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = 7;
        let logits = Array2::from_shape_fn((b, b), |_| rng.random_range(-3.0..3.0));
        let p = RetrievalDistribution::from_probs(row_softmax(logits.view(), 1.0), Direction::T2V, 1.0)
            .unwrap();
        let analytic = bias_gradient(&p).to_vec();
        let half_t2v = |delta: &[f64]| {
            let shifted = Array2::from_shape_fn((b, b), |(i, j)| logits[[i, j]] + delta[j]);
            0.5 * symmetric_cross_entropy(shifted.view()).0.t2v
        };
        let err = finite_difference_check(half_t2v, &vec![0.0; b], &analytic, 1e-5);
        assert!(err < 1e-5, "rel err {err}");
        // The full symmetric loss has the same item-bias gradient: per-query
        // shifts cancel inside the video-to-text softmax.
        let full = |delta: &[f64]| {
            let shifted = Array2::from_shape_fn((b, b), |(i, j)| logits[[i, j]] + delta[j]);
            symmetric_cross_entropy(shifted.view()).0.total
        };
        assert!(finite_difference_check(full, &vec![0.0; b], &analytic, 1e-5) < 1e-5);
    }

    #[test]
    fn finite_difference_on_simple_functions() {
        let err = finite_difference_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5);
        assert!(err < 1e-9, "{err}");
        let err = finite_difference_check(|x| 5.0 * x[0], &[2.0], &[5.0], 1e-5);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn one_ncl_step_reduces_adjusted_batch_error() {
        use crate::retrieval::normalization_error;
        use crate::sinkhorn::{adjust_similarity, compute_biases, MarginalPrior};
        let (b, d, gamma, lr) = (16, 8, 0.05, 0.01);
        let opts = SinkhornOptions::default();
        let prior = MarginalPrior::uniform(b, b).unwrap();
        // t2v error of the batch as the NCL objective sees it (after its biases)
        let error = |t: &EmbeddingSet, v: &EmbeddingSet| {
            let s = crate::embed::cosine_similarity_matrix(t, v).unwrap();
            let biases = compute_biases(&s, gamma, &prior, &opts).unwrap();
            let adjusted = adjust_similarity(&s, &biases).unwrap();
            normalization_error(&retrieval_distribution(&adjusted, gamma, Direction::T2V).unwrap())
        };
        let mut failures = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_set(&mut rng, b, d, Modality::Text);
            let v = random_set(&mut rng, b, d, Modality::Video);
            let (_, g, _) = ncl_loss(&t, &v, gamma, &opts).unwrap();
            let t2 = l2_normalize((&t.vectors() - &(lr * &g.d_text)).view(), Modality::Text).unwrap();
            let v2 = l2_normalize((&v.vectors() - &(lr * &g.d_video)).view(), Modality::Video).unwrap();
            if error(&t2, &v2) > error(&t, &v) {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} of 5 seeds increased the error");
    }
}
