//! Synthetic paired data and a small linear-encoder trainer comparing the
//! contrastive (CL) and normalized contrastive (NCL) objectives.
//!
//! Data: each video has a latent `z` drawn around one of `cluster_count`
//! centres (cluster sizes are Zipf-skewed). Text and video features are
//! `A z + o + σε` with modality-specific random maps `A` and constant offsets
//! `o`; the offsets give each modality its own mean, which is what makes some
//! items over-represented under plain contrastive training.
//!
//! Encoders are linear maps followed by L2 normalization, trained by plain
//! minibatch gradient descent.
//!
//! Randomness: one ChaCha8 generator per purpose, all seeded with `seed` and
//! separated by stream id: 0 = maps, centres and offsets; 1 = train samples;
//! 2 = test samples; 3 = encoder initialization; 4 = minibatch shuffling.

use std::fmt;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::embed::{cosine_similarity_matrix, l2_normalize, EmbeddingSet, Modality, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::loss::{contrastive_loss, ncl_loss, GradientSet};
use crate::queue::{apply_test_biases, biases_from_queries, oracle_biases, test_time_biases, QueryQueue};
use crate::retrieval::{compute_metrics_directional, Direction, GroundTruth, MetricsReport};
use crate::sinkhorn::SinkhornOptions;

const STREAM_MAPS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(rng);
        x * scale
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    /// Number of training videos.
    pub n_train: usize,
    /// Number of test videos.
    pub n_test: usize,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub video_dim: usize,
    pub noise_sigma: f64,
    pub cluster_count: usize,
    /// Spread of latents around their cluster centre.
    pub cluster_spread: f64,
    /// Captions per video.
    pub caption_multiplicity: usize,
    /// Norm scale of the per-modality constant feature offset.
    pub modality_offset: f64,
    /// Use the same map for both modalities (requires `text_dim == video_dim`).
    pub tied_maps: bool,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_test: 500,
            latent_dim: 16,
            text_dim: 32,
            video_dim: 32,
            noise_sigma: 0.5,
            cluster_count: 8,
            cluster_spread: 0.7,
            caption_multiplicity: 1,
            modality_offset: 1.0,
            tied_maps: false,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("latent_dim", self.latent_dim),
            ("text_dim", self.text_dim),
            ("video_dim", self.video_dim),
            ("cluster_count", self.cluster_count),
            ("caption_multiplicity", self.caption_multiplicity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, "must be at least 1"));
            }
        }
        if self.text_dim < self.latent_dim || self.video_dim < self.latent_dim {
            return Err(Error::param("latent_dim", "feature dims must be ≥ latent_dim"));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("cluster_spread", self.cluster_spread),
            ("modality_offset", self.modality_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("must be a nonnegative number, got {v}")));
            }
        }
        if self.tied_maps && self.text_dim != self.video_dim {
            return Err(Error::param("tied_maps", "requires text_dim == video_dim"));
        }
        Ok(())
    }
}

/// One split: captions (`n·multiplicity` rows) and videos (`n` rows) as raw
/// features, plus caption → video ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub text: Array2<f64>,
    pub video: Array2<f64>,
    /// Video index of every caption.
    pub caption_video: Vec<usize>,
    pub gt: GroundTruth,
}

impl SplitData {
    pub fn n_captions(&self) -> usize {
        self.text.nrows()
    }

    pub fn n_videos(&self) -> usize {
        self.video.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: SplitData,
    pub test: SplitData,
}

struct Generator {
    text_map: Array2<f64>,
    video_map: Array2<f64>,
    text_offset: Array1<f64>,
    video_offset: Array1<f64>,
    centres: Array2<f64>,
    cluster_cdf: Vec<f64>,
}

impl Generator {
    fn new(spec: &SyntheticDatasetSpec) -> Self {
        let mut rng = rng_for(spec.seed, STREAM_MAPS);
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let text_map = gaussian_matrix(&mut rng, spec.text_dim, spec.latent_dim, scale);
        let video_map = if spec.tied_maps {
            text_map.clone()
        } else {
            gaussian_matrix(&mut rng, spec.video_dim, spec.latent_dim, scale)
        };
        let text_offset = gaussian_matrix(&mut rng, 1, spec.text_dim, spec.modality_offset / (spec.text_dim as f64).sqrt())
            .remove_axis(Axis(0));
        let video_offset = gaussian_matrix(&mut rng, 1, spec.video_dim, spec.modality_offset / (spec.video_dim as f64).sqrt())
            .remove_axis(Axis(0));
        let centres = gaussian_matrix(&mut rng, spec.cluster_count, spec.latent_dim, 1.0);
        // Zipf-like cluster sizes
        let weights: Vec<f64> = (0..spec.cluster_count).map(|k| 1.0 / (k + 1) as f64).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cluster_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self {
            text_map,
            video_map,
            text_offset,
            video_offset,
            centres,
            cluster_cdf,
        }
    }

    fn sample(&self, spec: &SyntheticDatasetSpec, n: usize, stream: u64) -> SplitData {
        let mut rng = rng_for(spec.seed, stream);
        let mult = spec.caption_multiplicity;
        let mut video = Array2::zeros((n, spec.video_dim));
        let mut text = Array2::zeros((n * mult, spec.text_dim));
        let mut caption_video = Vec::with_capacity(n * mult);
        for v in 0..n {
            let u: f64 = rng.random();
            let k = self.cluster_cdf.iter().position(|&c| u < c).unwrap_or(self.cluster_cdf.len() - 1);
            let noise = gaussian_matrix(&mut rng, 1, spec.latent_dim, spec.cluster_spread).remove_axis(Axis(0));
            let z = &self.centres.row(k) + &noise;
            let base_v = self.video_map.dot(&z) + &self.video_offset;
            let eps = gaussian_matrix(&mut rng, 1, spec.video_dim, spec.noise_sigma).remove_axis(Axis(0));
            video.row_mut(v).assign(&(&base_v + &eps));
            let base_t = self.text_map.dot(&z) + &self.text_offset;
            for c in 0..mult {
                let eps = gaussian_matrix(&mut rng, 1, spec.text_dim, spec.noise_sigma).remove_axis(Axis(0));
                text.row_mut(v * mult + c).assign(&(&base_t + &eps));
                caption_video.push(v);
            }
        }
        let pairs: Vec<(usize, usize)> = caption_video.iter().copied().enumerate().collect();
        let gt = GroundTruth::from_pairs(n * mult, n, &pairs).expect("every caption has a video");
        SplitData {
            text,
            video,
            caption_video,
            gt,
        }
    }
}

/// Deterministic in `spec` (bitwise, on one platform).
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let gen = Generator::new(spec);
    Ok(SyntheticDataset {
        train: gen.sample(spec, spec.n_train, STREAM_TRAIN),
        test: gen.sample(spec, spec.n_test, STREAM_TEST),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Cl,
    Ncl,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Cl => "cl",
            LossKind::Ncl => "ncl",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cl" => Ok(LossKind::Cl),
            "ncl" => Ok(LossKind::Ncl),
            other => Err(Error::param("loss", format!("expected cl or ncl, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub queue_capacity: usize,
    pub embed_dim: usize,
    pub sinkhorn: SinkhornOptions,
    pub eval_ks: Vec<usize>,
    /// Also evaluate on the training split each epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Ncl,
            gamma: 0.05,
            batch_size: 128,
            epochs: 5,
            learning_rate: 0.05,
            queue_capacity: 512,
            embed_dim: 16,
            sinkhorn: SinkhornOptions::default(),
            eval_ks: vec![1, 5, 10],
            eval_train: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::param("batch_size", "must be at least 2"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::param("gamma", format!("must be positive, got {}", self.gamma)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::param("queue_capacity", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::param("embed_dim", "must be at least 1"));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::param("eval_ks", "need at least one K ≥ 1"));
        }
        self.sinkhorn.validate()
    }
}

/// Dataset spec and training config addressed as flat `key = value` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSetup {
    pub spec: SyntheticDatasetSpec,
    pub config: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::param(key, format!("cannot parse {value:?}")))
}

fn parse_list(key: &'static str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

impl TrainSetup {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "n_train",
        "n_test",
        "latent_dim",
        "text_dim",
        "video_dim",
        "noise_sigma",
        "cluster_count",
        "cluster_spread",
        "caption_multiplicity",
        "modality_offset",
        "tied_maps",
        "loss",
        "gamma",
        "batch_size",
        "epochs",
        "learning_rate",
        "queue_capacity",
        "embed_dim",
        "sinkhorn_iters",
        "sinkhorn_tol",
        "sinkhorn_log_domain",
        "eval_ks",
        "eval_train",
    ];

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (s, c) = (&mut self.spec, &mut self.config);
        match key {
            "seed" => s.seed = parse("seed", value)?,
            "n_train" => s.n_train = parse("n_train", value)?,
            "n_test" => s.n_test = parse("n_test", value)?,
            "latent_dim" => s.latent_dim = parse("latent_dim", value)?,
            "text_dim" => s.text_dim = parse("text_dim", value)?,
            "video_dim" => s.video_dim = parse("video_dim", value)?,
            "noise_sigma" => s.noise_sigma = parse("noise_sigma", value)?,
            "cluster_count" => s.cluster_count = parse("cluster_count", value)?,
            "cluster_spread" => s.cluster_spread = parse("cluster_spread", value)?,
            "caption_multiplicity" => s.caption_multiplicity = parse("caption_multiplicity", value)?,
            "modality_offset" => s.modality_offset = parse("modality_offset", value)?,
            "tied_maps" => s.tied_maps = parse("tied_maps", value)?,
            "loss" => c.loss_kind = value.trim().parse()?,
            "gamma" => c.gamma = parse("gamma", value)?,
            "batch_size" => c.batch_size = parse("batch_size", value)?,
            "epochs" => c.epochs = parse("epochs", value)?,
            "learning_rate" => c.learning_rate = parse("learning_rate", value)?,
            "queue_capacity" => c.queue_capacity = parse("queue_capacity", value)?,
            "embed_dim" => c.embed_dim = parse("embed_dim", value)?,
            "sinkhorn_iters" => c.sinkhorn.n_iters = parse("sinkhorn_iters", value)?,
            "sinkhorn_tol" => {
                c.sinkhorn.tol = match value.trim() {
                    "none" => None,
                    v => Some(parse("sinkhorn_tol", v)?),
                }
            }
            "sinkhorn_log_domain" => c.sinkhorn.log_domain = parse("sinkhorn_log_domain", value)?,
            "eval_ks" => c.eval_ks = parse_list("eval_ks", value)?,
            "eval_train" => c.eval_train = parse("eval_train", value)?,
            other => {
                return Err(Error::param("config", format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// Every key with its resolved value, in [`TrainSetup::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, c) = (&self.spec, &self.config);
        let ks: Vec<String> = c.eval_ks.iter().map(|k| k.to_string()).collect();
        vec![
            ("seed", s.seed.to_string()),
            ("n_train", s.n_train.to_string()),
            ("n_test", s.n_test.to_string()),
            ("latent_dim", s.latent_dim.to_string()),
            ("text_dim", s.text_dim.to_string()),
            ("video_dim", s.video_dim.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("cluster_count", s.cluster_count.to_string()),
            ("cluster_spread", s.cluster_spread.to_string()),
            ("caption_multiplicity", s.caption_multiplicity.to_string()),
            ("modality_offset", s.modality_offset.to_string()),
            ("tied_maps", s.tied_maps.to_string()),
            ("loss", c.loss_kind.to_string()),
            ("gamma", c.gamma.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("epochs", c.epochs.to_string()),
            ("learning_rate", c.learning_rate.to_string()),
            ("queue_capacity", c.queue_capacity.to_string()),
            ("embed_dim", c.embed_dim.to_string()),
            ("sinkhorn_iters", c.sinkhorn.n_iters.to_string()),
            ("sinkhorn_tol", c.sinkhorn.tol.map_or("none".into(), |t| t.to_string())),
            ("sinkhorn_log_domain", c.sinkhorn.log_domain.to_string()),
            ("eval_ks", ks.join(",")),
            ("eval_train", c.eval_train.to_string()),
        ]
    }

    /// `key=value` lines.
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`TrainSetup::echo`], truncated to 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `x ↦ normalize(W x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    pub weights: Array2<f64>,
    pub modality: Modality,
}

impl LinearEncoder {
    fn init(rng: &mut ChaCha8Rng, embed_dim: usize, input_dim: usize, modality: Modality) -> Self {
        let weights = gaussian_matrix(rng, embed_dim, input_dim, 1.0 / (input_dim as f64).sqrt());
        Self { weights, modality }
    }

    /// Pre-normalization outputs `U = X Wᵀ`.
    fn project(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights.t())
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<EmbeddingSet> {
        l2_normalize(self.project(x).view(), self.modality)
    }

    /// Backpropagates `∂L/∂e` through the normalization and the linear map.
    fn weight_gradient(&self, x: ArrayView2<f64>, emb: ArrayView2<f64>, d_emb: ArrayView2<f64>) -> Array2<f64> {
        let u = self.project(x);
        let mut d_u = d_emb.to_owned();
        for ((mut du, e), urow) in d_u.outer_iter_mut().zip(emb.outer_iter()).zip(u.outer_iter()) {
            let norm = urow.dot(&urow).sqrt();
            let radial = du.dot(&e);
            du.zip_mut_with(&e, |g, &ei| *g = (*g - radial * ei) / norm);
        }
        d_u.t().dot(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        })
    }
}

/// How scores are normalized before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    None,
    Queue,
    Oracle,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::None => "none",
            NormMode::Queue => "queue",
            NormMode::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub epoch: usize,
    pub split: SplitKind,
    pub mode: NormMode,
    pub t2v: MetricsReport,
    pub v2t: MetricsReport,
    pub warning: Option<String>,
}

/// Where the final test-time biases came from.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueProvenance {
    pub text_queue_len: usize,
    pub video_queue_len: usize,
    pub total_pushed: u64,
    pub t2v_residual: f64,
    pub v2t_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    /// Mean training loss per epoch (`epochs` entries).
    pub epoch_losses: Vec<f64>,
    /// Evaluations at epoch 0 (initialization) and after every epoch.
    pub evaluations: Vec<Evaluation>,
    pub final_queue: Option<QueueProvenance>,
    pub wall_clock: Duration,
}

impl RunRecord {
    pub fn find(&self, epoch: usize, split: SplitKind, mode: NormMode) -> Option<&Evaluation> {
        self.evaluations
            .iter()
            .find(|e| e.epoch == epoch && e.split == split && e.mode == mode)
    }

    pub fn last_epoch(&self) -> usize {
        self.evaluations.iter().map(|e| e.epoch).max().unwrap_or(0)
    }

    /// `epoch,split,mode,metric,value` rows (no wall-clock, so runs are
    /// byte-comparable).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,mode,metric,value\n");
        for (e, loss) in self.epoch_losses.iter().enumerate() {
            writeln!(s, "{},train,loss,mean_batch_loss,{loss}", e + 1).unwrap();
        }
        for ev in &self.evaluations {
            for report in [&ev.t2v, &ev.v2t] {
                for (name, value) in report.fields() {
                    if name == "gamma" || name.ends_with("norm_error") {
                        continue;
                    }
                    writeln!(s, "{},{},{},{}_{},{}", ev.epoch, ev.split, ev.mode, report.direction, name, value)
                        .unwrap();
                }
            }
            writeln!(s, "{},{},{},t2v_norm_error,{}", ev.epoch, ev.split, ev.mode, ev.t2v.t2v_norm_error).unwrap();
            writeln!(s, "{},{},{},v2t_norm_error,{}", ev.epoch, ev.split, ev.mode, ev.t2v.v2t_norm_error).unwrap();
        }
        s
    }
}

/// Trained encoders and the final query queues.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub text_encoder: LinearEncoder,
    pub video_encoder: LinearEncoder,
    pub text_queue: Option<QueryQueue>,
    pub video_queue: Option<QueryQueue>,
}

impl TrainedModel {
    pub fn embed(&self, split: &SplitData) -> Result<(EmbeddingSet, EmbeddingSet)> {
        Ok((
            self.text_encoder.encode(split.text.view())?,
            self.video_encoder.encode(split.video.view())?,
        ))
    }
}

pub fn train(spec: &SyntheticDatasetSpec, config: &TrainConfig) -> Result<RunRecord> {
    train_model(spec, config, config.loss_kind == LossKind::Ncl).map(|(r, _)| r)
}

/// Trains and also returns the model. Queues are kept when `keep_queues` is
/// set, whatever the loss.
pub fn train_model(
    spec: &SyntheticDatasetSpec,
    config: &TrainConfig,
    keep_queues: bool,
) -> Result<(RunRecord, TrainedModel)> {
    let started = Instant::now();
    config.validate()?;
    let data = generate_dataset(spec)?;
    let setup = TrainSetup {
        spec: spec.clone(),
        config: config.clone(),
    };

    let mut init_rng = rng_for(spec.seed, STREAM_INIT);
    let mut model = TrainedModel {
        text_encoder: LinearEncoder::init(&mut init_rng, config.embed_dim, spec.text_dim, Modality::Text),
        video_encoder: LinearEncoder::init(&mut init_rng, config.embed_dim, spec.video_dim, Modality::Video),
        text_queue: None,
        video_queue: None,
    };
    if keep_queues {
        model.text_queue = Some(QueryQueue::new(Modality::Text, config.embed_dim, config.queue_capacity)?);
        model.video_queue = Some(QueryQueue::new(Modality::Video, config.embed_dim, config.queue_capacity)?);
    }

    let mut evaluations = Vec::new();
    evaluate_epoch(&model, &data, config, 0, &mut evaluations)?;

    let mut shuffle_rng = rng_for(spec.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..data.train.n_captions()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let loss = train_step(&mut model, &data.train, chunk, config)
                .map_err(|e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged { epoch, step, loss },
                    other => other,
                })?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(if batches == 0 { f64::NAN } else { total / batches as f64 });
        evaluate_epoch(&model, &data, config, epoch, &mut evaluations)?;
    }

    let final_queue = match (&model.text_queue, &model.video_queue) {
        (Some(tq), Some(vq)) if !tq.is_empty() => {
            let (text, video) = model.embed(&data.test)?;
            let t2v = test_time_biases(tq, &video, config.gamma, &config.sinkhorn)?;
            let v2t = test_time_biases(vq, &text, config.gamma, &config.sinkhorn)?;
            Some(QueueProvenance {
                text_queue_len: tq.len(),
                video_queue_len: vq.len(),
                total_pushed: tq.total_pushed(),
                t2v_residual: t2v.residual,
                v2t_residual: v2t.residual,
            })
        }
        _ => None,
    };

    let record = RunRecord {
        config_hash: setup.hash(),
        epoch_losses,
        evaluations,
        final_queue,
        wall_clock: started.elapsed(),
    };
    Ok((record, model))
}

/// One gradient step on the captions in `batch`. Returns the batch loss.
fn train_step(model: &mut TrainedModel, split: &SplitData, batch: &[usize], config: &TrainConfig) -> Result<f64> {
    let text_x = split.text.select(Axis(0), batch);
    let video_idx: Vec<usize> = batch.iter().map(|&c| split.caption_video[c]).collect();
    let video_x = split.video.select(Axis(0), &video_idx);
    let text = model.text_encoder.encode(text_x.view())?;
    let video = model.video_encoder.encode(video_x.view())?;

    let (loss, grads): (_, GradientSet) = match config.loss_kind {
        LossKind::Cl => contrastive_loss(&text, &video, config.gamma)?,
        LossKind::Ncl => {
            let (l, g, _) = ncl_loss(&text, &video, config.gamma, &config.sinkhorn)?;
            (l, g)
        }
    };
    if !loss.total.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: loss.total,
        });
    }
    let d_wt = model
        .text_encoder
        .weight_gradient(text_x.view(), text.vectors(), grads.d_text.view());
    let d_wv = model
        .video_encoder
        .weight_gradient(video_x.view(), video.vectors(), grads.d_video.view());
    model.text_encoder.weights.scaled_add(-config.learning_rate, &d_wt);
    model.video_encoder.weights.scaled_add(-config.learning_rate, &d_wv);

    if let Some(q) = model.text_queue.as_mut() {
        q.push_batch(&text)?;
    }
    if let Some(q) = model.video_queue.as_mut() {
        q.push_batch(&video)?;
    }
    Ok(loss.total)
}

fn evaluate_epoch(
    model: &TrainedModel,
    data: &SyntheticDataset,
    config: &TrainConfig,
    epoch: usize,
    out: &mut Vec<Evaluation>,
) -> Result<()> {
    let splits: &[(SplitKind, &SplitData)] = if config.eval_train {
        &[(SplitKind::Train, &data.train), (SplitKind::Test, &data.test)]
    } else {
        &[(SplitKind::Test, &data.test)]
    };
    for &(kind, split) in splits {
        let (text, video) = model.embed(split)?;
        let s = cosine_similarity_matrix(&text, &video)?;
        let mut push = |mode, scores: &SimilarityMatrix, warning| -> Result<()> {
            let (t2v, v2t) = directional_metrics(scores, &split.gt, config)?;
            out.push(Evaluation {
                epoch,
                split: kind,
                mode,
                t2v,
                v2t,
                warning,
            });
            Ok(())
        };
        push(NormMode::None, &s, None)?;
        if let (Some(tq), Some(vq)) = (&model.text_queue, &model.video_queue) {
            if !tq.is_empty() {
                let t2v = test_time_biases(tq, &video, config.gamma, &config.sinkhorn)?;
                let v2t = test_time_biases(vq, &text, config.gamma, &config.sinkhorn)?;
                let warning = t2v.warning.clone();
                push(NormMode::Queue, &apply_test_biases(&s, &t2v, &v2t)?, warning)?;
            }
        }
        let (t2v, v2t) = oracle_biases(&text, &video, config.gamma, &config.sinkhorn)?;
        push(NormMode::Oracle, &apply_test_biases(&s, &t2v, &v2t)?, None)?;
    }
    Ok(())
}

fn directional_metrics(
    s: &SimilarityMatrix,
    gt: &GroundTruth,
    config: &TrainConfig,
) -> Result<(MetricsReport, MetricsReport)> {
    Ok((
        compute_metrics_directional(s, gt, config.gamma, &config.eval_ks, Direction::T2V)?,
        compute_metrics_directional(s, gt, config.gamma, &config.eval_ks, Direction::V2T)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `None` for the oracle row (test queries as the queue).
    pub queue_size: Option<usize>,
    pub used: usize,
    pub t2v_r1: f64,
    pub v2t_r1: f64,
    pub t2v_norm_error: f64,
    pub v2t_norm_error: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("queue_size,used,t2v_R@1,v2t_R@1,t2v_norm_error,v2t_norm_error\n");
    for r in rows {
        let k = r.queue_size.map_or("oracle".to_string(), |k| k.to_string());
        writeln!(
            s,
            "{k},{},{},{},{},{}",
            r.used, r.t2v_r1, r.v2t_r1, r.t2v_norm_error, r.v2t_norm_error
        )
        .unwrap();
    }
    s
}

/// Test metrics after normalizing with the given pseudo-query sets.
pub fn evaluate_with_queries(
    text: &EmbeddingSet,
    video: &EmbeddingSet,
    gt: &GroundTruth,
    text_queries: &EmbeddingSet,
    video_queries: &EmbeddingSet,
    config: &TrainConfig,
) -> Result<(MetricsReport, MetricsReport)> {
    let s = cosine_similarity_matrix(text, video)?;
    let t2v = biases_from_queries(text_queries, video, config.gamma, &config.sinkhorn)?;
    let v2t = biases_from_queries(video_queries, text, config.gamma, &config.sinkhorn)?;
    directional_metrics(&apply_test_biases(&s, &t2v, &v2t)?, gt, config)
}

/// Trains once, then re-evaluates test-time normalization with the most recent
/// `K` queue entries for every (deduplicated, sorted) size, followed by an
/// oracle row.
pub fn queue_size_sweep(
    spec: &SyntheticDatasetSpec,
    config: &TrainConfig,
    sizes: &[usize],
) -> Result<(RunRecord, Vec<SweepRow>)> {
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() || sizes[0] == 0 {
        return Err(Error::param("sizes", "need at least one size ≥ 1"));
    }
    let (record, model) = train_model(spec, config, true)?;
    let data = generate_dataset(spec)?;
    let (text, video) = model.embed(&data.test)?;
    let tq = model.text_queue.as_ref().expect("queues kept");
    let vq = model.video_queue.as_ref().expect("queues kept");

    let row = |size: Option<usize>, tqs: &EmbeddingSet, vqs: &EmbeddingSet| -> Result<SweepRow> {
        let (t2v, v2t) = evaluate_with_queries(&text, &video, &data.test.gt, tqs, vqs, config)?;
        Ok(SweepRow {
            queue_size: size,
            used: tqs.len(),
            t2v_r1: t2v.recall(1).unwrap_or(f64::NAN),
            v2t_r1: v2t.recall(1).unwrap_or(f64::NAN),
            t2v_norm_error: t2v.t2v_norm_error,
            v2t_norm_error: t2v.v2t_norm_error,
        })
    };
    let mut rows = Vec::with_capacity(sizes.len() + 1);
    for &k in &sizes {
        rows.push(row(Some(k), &tq.recent(k)?, &vq.recent(k)?)?);
    }
    rows.push(row(None, &text, &video)?);
    Ok((record, rows))
}
