use std::path::PathBuf;

use clap::{Args, ValueEnum};
use nclkit::queue::{apply_test_biases, biases_from_queries, oracle_biases};
use nclkit::retrieval::compute_metrics_directional;
use nclkit::sinkhorn::adjust_similarity;
use nclkit::{cosine_similarity_matrix, Direction, GroundTruth, Modality};

use crate::io::{header_line, load_biases, load_embeddings, load_ground_truth, load_queries, write_csv};
use crate::normalize::ScalingFlags;
use crate::{usage, OutDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BiasSource {
    /// Raw cosine scores.
    None,
    /// Biases computed from the test queries themselves.
    Oracle,
    /// Biases read from a `normalize` output (--bias-file).
    File,
    /// Biases from query sets (--text-queue, --video-queue).
    Queue,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Text embeddings (EMB1).
    #[arg(long)]
    pub text: PathBuf,
    /// Video embeddings (EMB1).
    #[arg(long)]
    pub video: PathBuf,
    /// `text,video` relevance pairs; defaults to text i ↔ video i.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BiasSource::None)]
    pub biases: BiasSource,
    /// `axis,index,bias` CSV written by `normalize`
    #[arg(long)]
    pub bias_file: Option<PathBuf>,
    /// Text query queue or EMB1 file (video-item biases).
    #[arg(long)]
    pub text_queue: Option<PathBuf>,
    /// Video query queue or EMB1 file (text-item biases).
    #[arg(long)]
    pub video_queue: Option<PathBuf>,
    #[command(flatten)]
    pub scaling: ScalingFlags,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub out: OutDir,
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let opts = args.scaling.options()?;
    let gamma = args.scaling.gamma;
    if args.ks.is_empty() || args.ks.contains(&0) {
        return Err(usage("--ks needs cutoffs ≥ 1"));
    }
    match args.biases {
        BiasSource::File if args.bias_file.is_none() => return Err(usage("--biases file needs --bias-file")),
        BiasSource::Queue if args.text_queue.is_none() || args.video_queue.is_none() => {
            return Err(usage("--biases queue needs --text-queue and --video-queue"))
        }
        _ => {}
    }

    let text = load_embeddings(&args.text, Modality::Text)?;
    let video = load_embeddings(&args.video, Modality::Video)?;
    let gt = match &args.gt {
        Some(p) => load_ground_truth(p, text.len(), video.len())?,
        None if text.len() == video.len() => GroundTruth::diagonal(text.len()),
        None => {
            return Err(usage(format!(
                "{} texts and {} videos: pass --gt for non-square data",
                text.len(),
                video.len()
            )))
        }
    };
    let s = cosine_similarity_matrix(&text, &video)?;
    let scored = match args.biases {
        BiasSource::None => s,
        BiasSource::Oracle => {
            let (t2v, v2t) = oracle_biases(&text, &video, gamma, &opts)?;
            apply_test_biases(&s, &t2v, &v2t)?
        }
        BiasSource::File => {
            let path = args.bias_file.as_ref().expect("checked above");
            adjust_similarity(&s, &load_biases(path, text.len(), video.len(), gamma)?)?
        }
        BiasSource::Queue => {
            let tq = load_queries(args.text_queue.as_ref().expect("checked above"), Modality::Text)?;
            let vq = load_queries(args.video_queue.as_ref().expect("checked above"), Modality::Video)?;
            let t2v = biases_from_queries(&tq, &video, gamma, &opts)?;
            let v2t = biases_from_queries(&vq, &text, gamma, &opts)?;
            apply_test_biases(&s, &t2v, &v2t)?
        }
    };

    let t2v = compute_metrics_directional(&scored, &gt, gamma, &args.ks, Direction::T2V)?;
    let v2t = compute_metrics_directional(&scored, &gt, gamma, &args.ks, Direction::V2T)?;

    let path_or = |p: &Option<PathBuf>, d: &str| p.as_ref().map_or(d.to_string(), |p| p.display().to_string());
    let ks: Vec<String> = args.ks.iter().map(|k| k.to_string()).collect();
    let mut settings = vec![
        ("command".to_string(), "eval".to_string()),
        ("text".into(), args.text.display().to_string()),
        ("video".into(), args.video.display().to_string()),
        ("gt".into(), path_or(&args.gt, "diagonal")),
        ("biases".into(), format!("{:?}", args.biases).to_lowercase()),
        ("bias_file".into(), path_or(&args.bias_file, "none")),
        ("text_queue".into(), path_or(&args.text_queue, "none")),
        ("video_queue".into(), path_or(&args.video_queue, "none")),
        ("ks".into(), ks.join(",")),
    ];
    settings.extend(args.scaling.settings());

    let t2v_csv = t2v.to_csv();
    let v2t_row = v2t.to_csv().lines().nth(1).unwrap_or_default().to_string();
    let body = format!("{t2v_csv}{v2t_row}\n");
    write_csv(&args.out.out, "metrics.csv", &header_line(&settings), &body)
}
