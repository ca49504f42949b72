//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned here.
//!
//! Run with `cargo test -p nclkit-cli --test acceptance -- --nocapture` to see
//! the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use nclkit::decomposition::{decomposition_residual, weighted_softmax_check};
use nclkit::loss::{
    bias_gradient, contrastive_loss, finite_difference_check, frozen_bias_objective, ncl_loss, symmetric_cross_entropy,
};
use nclkit::numeric::row_softmax;
use nclkit::queue::{apply_test_biases, oracle_biases, test_time_biases, QueryQueue};
use nclkit::retrieval::{
    compute_metrics_directional, false_rate_profile_with_edges, normalization_error, retrieval_distribution,
    RetrievalDistribution,
};
use nclkit::sinkhorn::{adjust_similarity, compute_biases, scale_matrix, verify_normalization};
use nclkit::synth::{queue_size_sweep, train, LossKind, NormMode, SplitKind, SyntheticDatasetSpec, TrainConfig};
use nclkit::{
    cosine_similarity_matrix, emb1, l2_normalize, Direction, EmbeddingSet, GroundTruth, MarginalPrior, Modality,
    SimilarityMatrix, SinkhornOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_TOL: f64 = 1e-6;
const C1_TIME: Duration = Duration::from_secs(10);
const C2_RESIDUAL: f64 = 1e-10;
const C2_ORACLE: f64 = 1e-8;
const C2_TIME: Duration = Duration::from_secs(5);
const C3_TOL: f64 = 1e-2;
const C4_TOL: f64 = 1e-5;
const C4_TIME: Duration = Duration::from_secs(10);
const C5_RESIDUAL: f64 = 1e-12;
const C5_SOFTMAX: f64 = 1e-9;
const C5_SOFTMAX_SHARP: f64 = 1e-7;
const C7_MIN_SEEDS: usize = 4;
const C7_TIME: Duration = Duration::from_secs(300);

/// Writes past the test harness capture so the report shows in plain `cargo test` output.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("[{}] {id} {detail}", if pass { "PASS" } else { "FAIL" });
        say!("{line}");
        self.lines.push((pass, line));
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize, modality: Modality) -> EmbeddingSet {
    let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    l2_normalize(raw.view(), modality).unwrap()
}

fn criterion_1(report: &mut Report) {
    let start = Instant::now();
    let sizes = [8, 12, 16, 24, 32, 48, 64, 96, 128, 256];
    let gammas = [1.0, 0.1, 0.05];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, &n) in sizes.iter().chain(sizes.iter()).enumerate() {
        let gamma = gammas[k % 3];
        let mut r = rng(100 + k as u64);
        let s = SimilarityMatrix::new(Array2::from_shape_fn((n, n), |_| r.random_range(-1.0..1.0)));
        let prior = MarginalPrior::uniform(n, n).unwrap();
        // small sharp kernels need far more than the default iteration cap
        let converged = SinkhornOptions {
            max_iters_cap: 1_000_000,
            ..SinkhornOptions::until(1e-13)
        };
        let biases = compute_biases(&s, gamma, &prior, &converged).unwrap();
        let (t2v, v2t) = verify_normalization(&adjust_similarity(&s, &biases).unwrap(), gamma, &prior).unwrap();
        worst = worst.max(t2v).max(v2t);
        count += 1;
    }
    let elapsed = start.elapsed();
    report.record(
        "1",
        worst < C1_TOL && elapsed < C1_TIME,
        format!(
            "normalization identity: {count} matrices 8..256, max error {worst:.2e} (< {C1_TOL:e}), {elapsed:.2?} (< {C1_TIME:?})"
        ),
    );
}

/// Plain alternating row/column rescaling in the linear domain.
fn naive_sinkhorn(k: &Array2<f64>, r: &[f64], c: &[f64]) -> Array2<f64> {
    let (m, n) = k.dim();
    let mut u = vec![1.0; m];
    let mut v = vec![1.0; n];
    for _ in 0..20_000 {
        for i in 0..m {
            let s: f64 = (0..n).map(|j| k[[i, j]] * v[j]).sum();
            u[i] = r[i] / s;
        }
        for j in 0..n {
            let s: f64 = (0..m).map(|i| k[[i, j]] * u[i]).sum();
            v[j] = c[j] / s;
        }
        let worst_row = (0..m)
            .map(|i| ((0..n).map(|j| u[i] * k[[i, j]] * v[j]).sum::<f64>() - r[i]).abs())
            .fold(0.0, f64::max);
        if worst_row < 1e-15 {
            break;
        }
    }
    Array2::from_shape_fn((m, n), |(i, j)| u[i] * k[[i, j]] * v[j])
}

fn criterion_2(report: &mut Report) {
    let start = Instant::now();
    let mut worst_residual: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..6u64 {
        let mut r = rng(200 + seed);
        let (m, n) = (8 + 4 * seed as usize, 10 + 3 * seed as usize);
        let k = Array2::from_shape_fn((m, n), |_| r.random_range(0.05..2.0));
        let priors = [
            MarginalPrior::uniform(m, n).unwrap(),
            MarginalPrior::from_weights(
                &(0..m).map(|_| r.random_range(0.2..3.0)).collect::<Vec<_>>(),
                &(0..n).map(|_| r.random_range(0.2..3.0)).collect::<Vec<_>>(),
            )
            .unwrap(),
        ];
        for prior in &priors {
            let (_, plan) = scale_matrix(k.view(), prior, &SinkhornOptions::until(1e-14)).unwrap();
            worst_residual = worst_residual.max(plan.max_marginal_error());
            let oracle = naive_sinkhorn(&k, prior.r(), prior.c());
            let gap = (&plan.plan - &oracle).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            worst_gap = worst_gap.max(gap);
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    report.record(
        "2",
        worst_residual < C2_RESIDUAL && worst_gap < C2_ORACLE && elapsed < C2_TIME,
        format!(
            "sinkhorn correctness: {cases} cases (uniform + non-uniform), residual {worst_residual:.2e} (< {C2_RESIDUAL:e}), \
             oracle gap {worst_gap:.2e} (< {C2_ORACLE:e}), {elapsed:.2?} (< {C2_TIME:?})"
        ),
    );
}

fn criterion_3(report: &mut Report) {
    let n = 256;
    let gamma = 0.05;
    let mut r = rng(300);
    let text = random_set(&mut r, n, 64, Modality::Text);
    let video = random_set(&mut r, n, 64, Modality::Video);
    let s = cosine_similarity_matrix(&text, &video).unwrap();
    let prior = MarginalPrior::uniform(n, n).unwrap();
    let raw_error = normalization_error(&retrieval_distribution(&s, gamma, Direction::T2V).unwrap());
    let biases = compute_biases(&s, gamma, &prior, &SinkhornOptions::fixed(4)).unwrap();
    let s_star = adjust_similarity(&s, &biases).unwrap();
    let t2v = normalization_error(&retrieval_distribution(&s_star, gamma, Direction::T2V).unwrap());
    let v2t = normalization_error(&retrieval_distribution(&s_star, gamma, Direction::V2T).unwrap());
    report.record(
        "3",
        t2v < C3_TOL && v2t < C3_TOL,
        format!(
            "four-iteration fidelity (256×256 cosine, γ=0.05): t2v {t2v:.3e}, v2t {v2t:.3e} (< {C3_TOL:e}; raw {raw_error:.3})"
        ),
    );
}

fn criterion_4(report: &mut Report) {
    let start = Instant::now();
    let (b, d) = (8, 16);
    let gammas = [1.0, 0.1, 0.05];
    let split = |x: &[f64]| {
        (
            Array2::from_shape_vec((b, d), x[..b * d].to_vec()).unwrap(),
            Array2::from_shape_vec((b, d), x[b * d..].to_vec()).unwrap(),
        )
    };
    let (mut cl_err, mut ncl_err, mut bias_err) = (0.0f64, 0.0f64, 0.0f64);
    for batch in 0..10u64 {
        let gamma = gammas[batch as usize % 3];
        let mut r = rng(400 + batch);
        let t = random_set(&mut r, b, d, Modality::Text);
        let v = random_set(&mut r, b, d, Modality::Video);
        let x: Vec<f64> = t.vectors().iter().chain(v.vectors().iter()).copied().collect();

        let (_, g) = contrastive_loss(&t, &v, gamma).unwrap();
        let analytic: Vec<f64> = g.d_text.iter().chain(g.d_video.iter()).copied().collect();
        let f = |x: &[f64]| {
            let (t, v) = split(x);
            frozen_bias_objective(t.view(), v.view(), gamma, None).0.total
        };
        cl_err = cl_err.max(finite_difference_check(f, &x, &analytic, 1e-5));

        let (_, g, biases) = ncl_loss(&t, &v, gamma, &SinkhornOptions::default()).unwrap();
        let analytic: Vec<f64> = g.d_text.iter().chain(g.d_video.iter()).copied().collect();
        let f = |x: &[f64]| {
            let (t, v) = split(x);
            frozen_bias_objective(t.view(), v.view(), gamma, Some(&biases)).0.total
        };
        ncl_err = ncl_err.max(finite_difference_check(f, &x, &analytic, 1e-5));

        // item-bias gradient of the symmetric loss at the batch logits
        let logits = cosine_similarity_matrix(&t, &v).unwrap().values().mapv(|s| s / gamma);
        let p = RetrievalDistribution::from_probs(row_softmax(logits.view(), 1.0), Direction::T2V, gamma).unwrap();
        let analytic = bias_gradient(&p).to_vec();
        let f = |delta: &[f64]| {
            let shifted = Array2::from_shape_fn((b, b), |(i, j)| logits[[i, j]] + delta[j]);
            symmetric_cross_entropy(shifted.view()).0.total
        };
        bias_err = bias_err.max(finite_difference_check(f, &vec![0.0; b], &analytic, 1e-5));
    }
    let elapsed = start.elapsed();
    report.record(
        "4",
        cl_err < C4_TOL && ncl_err < C4_TOL && bias_err < C4_TOL && elapsed < C4_TIME,
        format!(
            "gradients (10 batches, B=8, D=16): CL {cl_err:.2e}, NCL {ncl_err:.2e}, bias {bias_err:.2e} (< {C4_TOL:e}), {elapsed:.2?} (< {C4_TIME:?})"
        ),
    );
}

fn criterion_5(report: &mut Report) {
    let gammas = [1.0, 0.1, 0.05];
    let mut residual: f64 = 0.0;
    let mut pass = true;
    let mut softmax = [0.0f64; 3];
    for k in 0..10u64 {
        let gamma = gammas[k as usize % 3];
        let mut r = rng(500 + k);
        let (m, n, d) = (10 + k as usize, 14 + 2 * k as usize, 6 + k as usize);
        // shifted clouds so the modal means are far from zero
        let mut shifted = |n, modality, shift: f64| {
            let raw = Array2::from_shape_fn((n, d), |(_, c)| r.random_range(-1.0..1.0) + if c == 0 { shift } else { 0.0 });
            l2_normalize(raw.view(), modality).unwrap()
        };
        let t = shifted(m, Modality::Text, 1.5);
        let v = shifted(n, Modality::Video, -0.5);
        let res = decomposition_residual(&t, &v).unwrap();
        let dev = weighted_softmax_check(&t, &v, gamma).unwrap();
        residual = residual.max(res);
        let slot = k as usize % 3;
        softmax[slot] = softmax[slot].max(dev);
        let bound = if gamma == 0.05 { C5_SOFTMAX_SHARP } else { C5_SOFTMAX };
        pass &= res < C5_RESIDUAL && dev < bound;
    }
    report.record(
        "5",
        pass,
        format!(
            "modal decomposition: residual {residual:.2e} (< {C5_RESIDUAL:e}); weighted softmax γ=1 {:.2e}, γ=0.1 {:.2e} \
             (< {C5_SOFTMAX:e}), γ=0.05 {:.2e} (< {C5_SOFTMAX_SHARP:e}); 10 fixtures",
            softmax[0], softmax[1], softmax[2]
        ),
    );
}

fn criterion_6(report: &mut Report) {
    let gamma = 0.05;
    let opts = SinkhornOptions::default();
    let mut r = rng(600);
    let n = 120;
    let text = random_set(&mut r, n, 12, Modality::Text);
    let noisy = text.vectors().mapv(|x| x + r.random_range(-0.5..0.5));
    let video = l2_normalize(noisy.view(), Modality::Video).unwrap();
    let gt = GroundTruth::diagonal(n);
    let s = cosine_similarity_matrix(&text, &video).unwrap();

    let mut tq = QueryQueue::new(Modality::Text, 12, n).unwrap();
    let mut vq = QueryQueue::new(Modality::Video, 12, n).unwrap();
    tq.push_batch(&text).unwrap();
    vq.push_batch(&video).unwrap();
    let queued = apply_test_biases(
        &s,
        &test_time_biases(&tq, &video, gamma, &opts).unwrap(),
        &test_time_biases(&vq, &text, gamma, &opts).unwrap(),
    )
    .unwrap();
    let (t2v, v2t) = oracle_biases(&text, &video, gamma, &opts).unwrap();
    let direct = apply_test_biases(&s, &t2v, &v2t).unwrap();

    let metrics = |m: &SimilarityMatrix| {
        [Direction::T2V, Direction::V2T].map(|d| compute_metrics_directional(m, &gt, gamma, &[1, 5, 10], d).unwrap())
    };
    let (a, b) = (metrics(&queued), metrics(&direct));
    let bits = |m: &SimilarityMatrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = a == b && bits(&queued) == bits(&direct);
    report.record(
        "6",
        identical,
        format!(
            "oracle equivalence ({n} test pairs, 4 iterations): queue == direct bitwise: {identical} (R@1 {})",
            a[0].recall(1).unwrap()
        ),
    );
}

fn criterion_7(report: &mut Report, suite_start: Instant) {
    let start = Instant::now();
    let spec = SyntheticDatasetSpec::default();
    let base = TrainConfig {
        eval_train: false,
        ..TrainConfig::default()
    };
    let sizes = [1, 8, 64, base.queue_capacity];
    let (mut a, mut b, mut c) = (0, 0, 0);
    for seed in 0..5u64 {
        let spec = SyntheticDatasetSpec { seed, ..spec.clone() };
        let ncl = TrainConfig {
            loss_kind: LossKind::Ncl,
            ..base.clone()
        };
        let cl = TrainConfig {
            loss_kind: LossKind::Cl,
            ..base.clone()
        };
        let (ncl_run, rows) = queue_size_sweep(&spec, &ncl, &sizes).unwrap();
        let cl_run = train(&spec, &cl).unwrap();
        let last = ncl_run.last_epoch();
        let eval = |run: &nclkit::synth::RunRecord, mode| run.find(last, SplitKind::Test, mode).unwrap().clone();
        let (none, queue, oracle) = (eval(&ncl_run, NormMode::None), eval(&ncl_run, NormMode::Queue), eval(&ncl_run, NormMode::Oracle));
        let cl_none = eval(&cl_run, NormMode::None);

        let a_ok = queue.t2v.t2v_norm_error < cl_none.t2v.t2v_norm_error;
        let ordered = |f: &dyn Fn(&nclkit::synth::Evaluation) -> f64| f(&oracle) >= f(&queue) && f(&queue) >= f(&none);
        let b_ok = ordered(&|e| e.t2v.recall(1).unwrap()) && ordered(&|e| e.v2t.recall(1).unwrap());
        let (k1, kmax) = (&rows[0], &rows[sizes.len() - 1]);
        let c_ok = kmax.t2v_r1 >= k1.t2v_r1 && kmax.v2t_r1 >= k1.v2t_r1;
        a += a_ok as usize;
        b += b_ok as usize;
        c += c_ok as usize;
        say!(
            "    seed {seed}: err NCL+queue {:.4} vs CL raw {:.4}; t2v R@1 none {:.3} queue {:.3} oracle {:.3}; \
             v2t R@1 none {:.3} queue {:.3} oracle {:.3}; sweep t2v K=1 {:.3} K={} {:.3}",
            queue.t2v.t2v_norm_error,
            cl_none.t2v.t2v_norm_error,
            none.t2v.recall(1).unwrap(),
            queue.t2v.recall(1).unwrap(),
            oracle.t2v.recall(1).unwrap(),
            none.v2t.recall(1).unwrap(),
            queue.v2t.recall(1).unwrap(),
            oracle.v2t.recall(1).unwrap(),
            k1.t2v_r1,
            base.queue_capacity,
            kmax.t2v_r1
        );
    }
    let part = start.elapsed();
    let suite = suite_start.elapsed();
    report.record(
        "7",
        a >= C7_MIN_SEEDS && b >= C7_MIN_SEEDS && c >= C7_MIN_SEEDS && suite < C7_TIME,
        format!(
            "directional reproduction: (a) {a}/5, (b) {b}/5, (c) {c}/5 (need ≥ {C7_MIN_SEEDS}); training {part:.2?}, \
             suite so far {suite:.2?} (< {C7_TIME:?})"
        ),
    );
}

fn criterion_8(report: &mut Report) {
    // strong matches, item scores shifted by a skewed per-item offset
    let n = 200;
    let gamma = 0.05;
    let mut r = rng(7);
    let offsets: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
            0.05 * x
        })
        .collect();
    let s = Array2::from_shape_fn((n, n), |(i, j)| {
        (if i == j { 0.3 } else { 0.0 }) + offsets[j] + 0.1 * r.random_range(-1.0..1.0)
    });
    let p = retrieval_distribution(&SimilarityMatrix::new(s), gamma, Direction::T2V).unwrap();
    let edges = vec![0.0, 0.5, 0.8, 0.9, 1.1, 1.25, 1.5, 2.0];
    let profile = false_rate_profile_with_edges(&p, &GroundTruth::diagonal(n), edges).unwrap();
    let combined: Array1<f64> = (0..profile.n_bins())
        .map(|b| profile.false_negative_rate[b] + profile.false_positive_rate[b])
        .collect();
    let populated: Vec<usize> = (0..profile.n_bins()).filter(|&b| profile.counts[b] > 0).collect();
    let centre = profile.bin_of(1.0);
    let is_min = profile.counts[centre] > 0 && populated.iter().all(|&b| combined[centre] <= combined[b]);
    let (lo, hi) = (populated[0], *populated.last().unwrap());
    let u_shaped = combined[lo] > combined[centre] && combined[hi] > combined[centre];
    let cells: Vec<String> = populated
        .iter()
        .map(|&b| format!("[{},{}):{:.3}", profile.bin_edges[b], profile.bin_edges[b + 1], combined[b]))
        .collect();
    report.record(
        "8",
        is_min && u_shaped,
        format!(
            "false-rate profile: bin holding sum=1 is the minimum: {is_min}, both extreme bins higher: {u_shaped} ({})",
            cells.join(" ")
        ),
    );
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nclkit")
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(bin()).args(args).output().map(|o| o.status.success()).unwrap_or(false)
}

/// Every file in `dir` with its first line dropped, by name.
fn bodies(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let bytes = fs::read(&path).unwrap();
            let body = match bytes.iter().position(|&b| b == b'\n') {
                Some(i) if bytes.starts_with(b"#") => bytes[i + 1..].to_vec(),
                _ => bytes,
            };
            (path.file_name().unwrap().to_string_lossy().into_owned(), body)
        })
        .collect();
    out.sort();
    out
}

fn criterion_9(report: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut r = rng(900);
    let text_path = root.join("text.emb1");
    let video_path = root.join("video.emb1");
    emb1::save(&text_path, &random_set(&mut r, 40, 8, Modality::Text)).unwrap();
    emb1::save(&video_path, &random_set(&mut r, 40, 8, Modality::Video)).unwrap();
    let (t, v) = (text_path.to_str().unwrap(), video_path.to_str().unwrap());

    let train_flags = ["--seed", "3", "--set", "n_train=200", "--set", "n_test=50", "--epochs", "2"];
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("normalize", vec!["normalize", "--text", t, "--video", v, "--iters", "50"]),
        ("eval none", vec!["eval", "--text", t, "--video", v]),
        ("eval oracle", vec!["eval", "--text", t, "--video", v, "--biases", "oracle"]),
        (
            "eval queue",
            vec!["eval", "--text", t, "--video", v, "--biases", "queue", "--text-queue", t, "--video-queue", v],
        ),
        ("analyze", vec!["analyze", "--text", t, "--video", v]),
        ("train", [&["train"][..], &train_flags[..]].concat()),
        ("sweep", [&["sweep", "--sizes", "1,16,64"][..], &train_flags[..]].concat()),
    ];
    let mut failed = Vec::new();
    for (i, (name, args)) in commands.iter().enumerate() {
        let dirs: Vec<PathBuf> = (0..2).map(|k| root.join(format!("out{i}_{k}"))).collect();
        let ok = dirs.iter().all(|d| {
            let mut full = args.clone();
            full.extend(["--out", d.to_str().unwrap()]);
            run_cli(&full)
        });
        if !ok || bodies(&dirs[0]) != bodies(&dirs[1]) || bodies(&dirs[0]).is_empty() {
            failed.push(*name);
        }
    }
    report.record(
        "9",
        failed.is_empty(),
        format!(
            "CLI determinism: {} commands run twice, byte-identical bodies; failing: {:?}",
            commands.len(),
            failed
        ),
    );
}

#[test]
fn acceptance() {
    let suite_start = Instant::now();
    let mut report = Report { lines: Vec::new() };
    criterion_1(&mut report);
    criterion_2(&mut report);
    criterion_3(&mut report);
    criterion_4(&mut report);
    criterion_5(&mut report);
    criterion_6(&mut report);
    criterion_8(&mut report);
    criterion_9(&mut report);
    criterion_7(&mut report, suite_start);
    let failed: Vec<&String> = report.lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "failing criteria:\n{failed:#?}");
}
