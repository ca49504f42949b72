//! Modal-mean decomposition of cross-modal similarities.
//!
//! Writing `t_i = μ_t + t'_i` and `v_j = μ_v + v'_j` splits every score into
//! `⟨μ_t, μ_v⟩ + ⟨μ_v, t'_i⟩ + ⟨μ_t, v'_j⟩ + ⟨t'_i, v'_j⟩`. The middle terms act
//! as implicit per-text and per-video biases; for text-to-video retrieval the
//! video term turns the softmax into one weighted by `exp(⟨μ_t, v'_j⟩/γ)`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

use crate::embed::{inner_products, EmbeddingSet};
use crate::error::{Error, Result};
use crate::numeric::{dot, max_abs_diff, row_softmax};

#[derive(Debug, Clone, PartialEq)]
pub struct ModalMeans {
    pub mu_t: Array1<f64>,
    pub mu_v: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Displacements {
    pub t_prime: Array2<f64>,
    pub v_prime: Array2<f64>,
}

pub fn modal_decompose(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<(ModalMeans, Displacements)> {
    check_dims(text, video)?;
    let mu_t = text.vectors().mean_axis(Axis(0)).expect("non-empty set");
    let mu_v = video.vectors().mean_axis(Axis(0)).expect("non-empty set");
    let t_prime = &text.vectors() - &mu_t;
    let v_prime = &video.vectors() - &mu_v;
    Ok((ModalMeans { mu_t, mu_v }, Displacements { t_prime, v_prime }))
}

fn check_dims(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<()> {
    if text.dim() != video.dim() {
        return Err(Error::DimensionMismatch {
            expected: text.dim(),
            actual: video.dim(),
        });
    }
    Ok(())
}

/// The four additive terms of every text × video score.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTerms {
    /// `⟨μ_t, μ_v⟩`
    pub constant: f64,
    /// `⟨μ_v, t'_i⟩`, one per text
    pub text_bias: Array1<f64>,
    /// `⟨μ_t, v'_j⟩`, one per video
    pub video_bias: Array1<f64>,
    /// `⟨t'_i, v'_j⟩`
    pub alignment: Array2<f64>,
}

impl SimilarityTerms {
    /// The four terms as full `m × n` matrices.
    pub fn to_matrices(&self) -> [Array2<f64>; 4] {
        let (m, n) = self.alignment.dim();
        [
            Array2::from_elem((m, n), self.constant),
            Array2::from_shape_fn((m, n), |(i, _)| self.text_bias[i]),
            Array2::from_shape_fn((m, n), |(_, j)| self.video_bias[j]),
            self.alignment.clone(),
        ]
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        let mut out = self.alignment.clone();
        for ((i, j), v) in out.indexed_iter_mut() {
            *v += self.constant + self.text_bias[i] + self.video_bias[j];
        }
        out
    }
}

pub fn similarity_decomposition(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<SimilarityTerms> {
    let (means, disp) = modal_decompose(text, video)?;
    Ok(SimilarityTerms {
        constant: dot(means.mu_t.view(), means.mu_v.view()),
        text_bias: disp.t_prime.outer_iter().map(|t| dot(means.mu_v.view(), t)).collect(),
        video_bias: disp.v_prime.outer_iter().map(|v| dot(means.mu_t.view(), v)).collect(),
        alignment: inner_products(disp.t_prime.view(), disp.v_prime.view()),
    })
}

/// Max entrywise gap between the reconstructed terms and the raw scores.
pub fn decomposition_residual(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<f64> {
    let terms = similarity_decomposition(text, video)?;
    let raw = inner_products(text.vectors(), video.vectors());
    Ok(max_abs_diff(terms.reconstruct().view(), raw.view()))
}

/// Max entrywise gap between the text-to-video softmax of the raw scores and
/// the softmax of `⟨t'_i, v'_j⟩` weighted by `exp(⟨μ_t, v'_j⟩/γ)`, evaluated in
/// the log domain.
pub fn weighted_softmax_check(text: &EmbeddingSet, video: &EmbeddingSet, gamma: f64) -> Result<f64> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::param("gamma", format!("must be positive and finite, got {gamma}")));
    }
    let direct = row_softmax(inner_products(text.vectors(), video.vectors()).view(), 1.0 / gamma);
    let (weights, alignment) = video_weights(text, video, gamma)?;
    let mut logits = alignment.mapv(|a| a / gamma);
    for mut row in logits.outer_iter_mut() {
        row += &weights;
    }
    let weighted = row_softmax(logits.view(), 1.0);
    Ok(max_abs_diff(direct.view(), weighted.view()))
}

/// `(log β_j, ⟨t'_i, v'_j⟩)` with `log β_j = ⟨μ_t, v'_j⟩/γ`.
pub fn video_weights(
    text: &EmbeddingSet,
    video: &EmbeddingSet,
    gamma: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let terms = similarity_decomposition(text, video)?;
    Ok((terms.video_bias.mapv(|b| b / gamma), terms.alignment))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityStats {
    /// Mean off-diagonal text-text cosine (NaN with fewer than two texts).
    pub text_text: f64,
    /// Mean off-diagonal video-video cosine (NaN with fewer than two videos).
    pub video_video: f64,
    /// Mean over all text-video pairs.
    pub text_video: f64,
}

impl ModalityStats {
    /// `metric,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "text_text,{}", self.text_text).unwrap();
        writeln!(s, "video_video,{}", self.video_video).unwrap();
        writeln!(s, "text_video,{}", self.text_video).unwrap();
        s
    }
}

pub fn modality_similarity_stats(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<ModalityStats> {
    check_dims(text, video)?;
    let off_diagonal_mean = |set: &EmbeddingSet| {
        let n = set.len();
        if n < 2 {
            return f64::NAN;
        }
        let g = inner_products(set.vectors(), set.vectors());
        let total: f64 = g.indexed_iter().filter(|((i, j), _)| i != j).map(|(_, v)| v).sum();
        total / (n * (n - 1)) as f64
    };
    let cross = inner_products(text.vectors(), video.vectors());
    Ok(ModalityStats {
        text_text: off_diagonal_mean(text),
        video_video: off_diagonal_mean(video),
        text_video: cross.mean().expect("non-empty"),
    })
}

/// Raw pairwise scores as `text,video,similarity` rows, for external plotting.
pub fn similarity_csv(text: &EmbeddingSet, video: &EmbeddingSet) -> Result<String> {
    check_dims(text, video)?;
    let s = inner_products(text.vectors(), video.vectors());
    let mut out = String::from("text,video,similarity\n");
    for ((i, j), v) in s.indexed_iter() {
        writeln!(out, "{},{},{}", text.ids()[i], video.ids()[j], v).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{l2_normalize, Modality};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, d: usize, modality: Modality) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        l2_normalize(raw.view(), modality).unwrap()
    }

    #[test]
    fn antipodal_texts_have_zero_mean() {
        let t = EmbeddingSet::new(Modality::Text, array![[0.6, 0.8], [-0.6, -0.8]]).unwrap();
        let v = EmbeddingSet::new(Modality::Video, array![[1.0, 0.0]]).unwrap();
        let (means, disp) = modal_decompose(&t, &v).unwrap();
        assert_eq!(means.mu_t, array![0.0, 0.0]);
        assert_eq!(disp.t_prime, t.vectors());
    }

    #[test]
    fn identical_vectors_have_zero_displacement() {
        let t = EmbeddingSet::new(Modality::Text, array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        let (means, disp) = modal_decompose(&t, &t).unwrap();
        assert!(max_abs_diff(means.mu_t.view().insert_axis(Axis(0)), array![[0.6, 0.8]].view()) < 1e-15);
        assert!(disp.t_prime.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn recomposition_is_exact() {
        let t = random_set(1, 16, 8, Modality::Text);
        let v = random_set(2, 16, 8, Modality::Video);
        let (means, disp) = modal_decompose(&t, &v).unwrap();
        let back = &disp.t_prime + &means.mu_t;
        assert!(max_abs_diff(back.view(), t.vectors()) < 1e-12);
        for col in disp.t_prime.columns().into_iter().chain(disp.v_prime.columns()) {
            assert!(col.mean().unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn zero_mean_inputs_leave_only_alignment() {
        let t = EmbeddingSet::new(Modality::Text, array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let v = EmbeddingSet::new(Modality::Video, array![[0.0, 1.0], [0.0, -1.0]]).unwrap();
        let terms = similarity_decomposition(&t, &v).unwrap();
        assert_eq!(terms.constant, 0.0);
        assert!(terms.text_bias.iter().chain(terms.video_bias.iter()).all(|x| *x == 0.0));
        assert_eq!(terms.alignment, inner_products(t.vectors(), v.vectors()));
    }

    #[test]
    fn constant_sets_leave_only_the_constant() {
        let t = EmbeddingSet::new(Modality::Text, array![[0.6, 0.8], [0.6, 0.8]]).unwrap();
        let v = EmbeddingSet::new(Modality::Video, array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        let terms = similarity_decomposition(&t, &v).unwrap();
        assert!(terms.alignment.iter().all(|x| x.abs() < 1e-15));
        assert!(terms.reconstruct().iter().all(|x| (x - 0.6).abs() < 1e-15));
        let mats = terms.to_matrices();
        assert_eq!(mats[0].dim(), (2, 3));
    }

    #[test]
    fn identity_holds_on_random_sets() {
        let t = random_set(3, 9, 7, Modality::Text);
        let v = random_set(4, 11, 7, Modality::Video);
        assert!(decomposition_residual(&t, &v).unwrap() < 1e-12);
    }

    #[test]
    fn weighted_softmax_equivalence() {
        let t = random_set(5, 12, 6, Modality::Text);
        let v = random_set(6, 12, 6, Modality::Video);
        assert!(weighted_softmax_check(&t, &v, 1.0).unwrap() < 1e-9);
        assert!(weighted_softmax_check(&t, &v, 0.05).unwrap() < 1e-7);
    }

    #[test]
    fn zero_mean_texts_give_unit_video_weights() {
        // β_j = exp(⟨μ_t, v'_j⟩/γ) is 1 for every video exactly when μ_t = 0.
        let t = EmbeddingSet::new(Modality::Text, array![[0.6, 0.8], [-0.6, -0.8]]).unwrap();
        let v = random_set(7, 5, 2, Modality::Video);
        let (log_w, alignment) = video_weights(&t, &v, 0.1).unwrap();
        assert!(log_w.iter().all(|w| *w == 0.0));
        let plain = row_softmax(alignment.view(), 10.0);
        let direct = row_softmax(inner_products(t.vectors(), v.vectors()).view(), 10.0);
        assert!(max_abs_diff(plain.view(), direct.view()) < 1e-12);
    }

    #[test]
    fn modality_stats_edge_cases() {
        let t = EmbeddingSet::new(Modality::Text, array![[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        let v = EmbeddingSet::new(Modality::Video, array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]]).unwrap();
        let s = modality_similarity_stats(&t, &v).unwrap();
        assert_eq!((s.text_text, s.video_video, s.text_video), (1.0, 1.0, 0.0));

        let t = EmbeddingSet::new(Modality::Text, array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let v = EmbeddingSet::new(Modality::Video, array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]).unwrap();
        let s = modality_similarity_stats(&t, &v).unwrap();
        assert_eq!((s.text_text, s.video_video, s.text_video), (0.0, 0.0, 0.0));
        assert!(s.to_csv().starts_with("metric,value\ntext_text,0\n"));
    }
}
