use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use nclkit::decomposition::{
    decomposition_residual, modal_decompose, modality_similarity_stats, similarity_csv, similarity_decomposition,
    weighted_softmax_check,
};
use nclkit::retrieval::{false_rate_profile, retrieval_distribution};
use nclkit::{cosine_similarity_matrix, Direction, GroundTruth, Modality};

use crate::io::{header_line, load_embeddings, load_ground_truth, write_csv};
use crate::{usage, OutDir};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Text embeddings (EMB1).
    #[arg(long)]
    pub text: PathBuf,
    /// Video embeddings (EMB1).
    #[arg(long)]
    pub video: PathBuf,
    /// `text,video` relevance pairs for the false-rate profile; defaults to diagonal.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    /// Equal-width bins over summed probability in [0, 2].
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[command(flatten)]
    pub out: OutDir,
}

fn mean_abs(v: &ndarray::Array1<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn max_abs(v: &ndarray::Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn run(args: &AnalyzeArgs) -> anyhow::Result<()> {
    if !(args.gamma.is_finite() && args.gamma > 0.0) {
        return Err(usage(format!("--gamma must be positive, got {}", args.gamma)));
    }
    if args.bins < 2 {
        return Err(usage("--bins must be at least 2"));
    }
    let text = load_embeddings(&args.text, Modality::Text)?;
    let video = load_embeddings(&args.video, Modality::Video)?;
    let gt = match &args.gt {
        Some(p) => load_ground_truth(p, text.len(), video.len())?,
        None if text.len() == video.len() => GroundTruth::diagonal(text.len()),
        None => return Err(usage("non-square data: pass --gt for the false-rate profile")),
    };

    let settings = vec![
        ("command".to_string(), "analyze".to_string()),
        ("text".into(), args.text.display().to_string()),
        ("video".into(), args.video.display().to_string()),
        ("gt".into(), args.gt.as_ref().map_or("diagonal".into(), |p| p.display().to_string())),
        ("gamma".into(), args.gamma.to_string()),
        ("bins".into(), args.bins.to_string()),
    ];
    let header = header_line(&settings);
    let out = &args.out.out;

    let (means, _) = modal_decompose(&text, &video)?;
    let terms = similarity_decomposition(&text, &video)?;
    let mut body = String::from("metric,value\n");
    writeln!(body, "mu_t_norm,{}", means.mu_t.dot(&means.mu_t).sqrt())?;
    writeln!(body, "mu_v_norm,{}", means.mu_v.dot(&means.mu_v).sqrt())?;
    writeln!(body, "constant,{}", terms.constant)?;
    writeln!(body, "text_bias_mean_abs,{}", mean_abs(&terms.text_bias))?;
    writeln!(body, "text_bias_max_abs,{}", max_abs(&terms.text_bias))?;
    writeln!(body, "video_bias_mean_abs,{}", mean_abs(&terms.video_bias))?;
    writeln!(body, "video_bias_max_abs,{}", max_abs(&terms.video_bias))?;
    writeln!(body, "decomposition_residual,{}", decomposition_residual(&text, &video)?)?;
    writeln!(body, "weighted_softmax_deviation,{}", weighted_softmax_check(&text, &video, args.gamma)?)?;
    write_csv(out, "decomposition.csv", &header, &body)?;

    let mut body = String::from("axis,index,bias_term\n");
    for (i, v) in terms.text_bias.iter().enumerate() {
        writeln!(body, "text,{i},{v}")?;
    }
    for (j, v) in terms.video_bias.iter().enumerate() {
        writeln!(body, "video,{j},{v}")?;
    }
    write_csv(out, "bias_terms.csv", &header, &body)?;

    write_csv(out, "modality_stats.csv", &header, &modality_similarity_stats(&text, &video)?.to_csv())?;

    let s = cosine_similarity_matrix(&text, &video)?;
    let p = retrieval_distribution(&s, args.gamma, Direction::T2V)?;
    write_csv(out, "false_rates.csv", &header, &false_rate_profile(&p, &gt, args.bins)?.to_csv())?;

    write_csv(out, "similarity.csv", &header, &similarity_csv(&text, &video)?)
}
