use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use nclkit::sinkhorn::{adjust_similarity, compute_biases_with_scaling, normalization_deviations};
use nclkit::{cosine_similarity_matrix, MarginalPrior, Modality, SimilarityMatrix, SinkhornOptions};

use crate::io::{header_line, load_counts, load_embeddings, write_csv};
use crate::{usage, OutDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorKind {
    Uniform,
    Counts,
}

/// Sinkhorn settings shared by `normalize` and `eval`.
#[derive(Args, Debug, Clone)]
pub struct ScalingFlags {
    /// Softmax temperature.
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    /// Fixed number of Sinkhorn iterations.
    #[arg(long, default_value_t = 4)]
    pub iters: usize,
    /// Iterate until the marginal residual drops below this (overrides --iters).
    #[arg(long)]
    pub tol: Option<f64>,
}

impl ScalingFlags {
    pub fn options(&self) -> anyhow::Result<SinkhornOptions> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(usage(format!("--gamma must be positive, got {}", self.gamma)));
        }
        let opts = match self.tol {
            Some(t) => SinkhornOptions::until(t),
            None => SinkhornOptions::fixed(self.iters),
        };
        opts.validate()?;
        Ok(opts)
    }

    pub fn settings(&self) -> Vec<(String, String)> {
        vec![
            ("gamma".into(), self.gamma.to_string()),
            ("iters".into(), self.iters.to_string()),
            ("tol".into(), self.tol.map_or("none".into(), |t| t.to_string())),
        ]
    }
}

#[derive(Args, Debug)]
pub struct NormalizeArgs {
    /// Text embeddings (EMB1).
    #[arg(long)]
    pub text: PathBuf,
    /// Video embeddings (EMB1).
    #[arg(long)]
    pub video: PathBuf,
    #[command(flatten)]
    pub scaling: ScalingFlags,
    /// Item marginal prior.
    #[arg(long, value_enum, default_value_t = PriorKind::Uniform)]
    pub prior: PriorKind,
    /// Per-video query counts, one per line (with --prior counts).
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
}

fn error_rows(s: &SimilarityMatrix, gamma: f64, prior: &MarginalPrior, stage: &str, out: &mut String) -> anyhow::Result<()> {
    let (t2v, v2t) = normalization_deviations(s, gamma, prior)?;
    let max = |d: &ndarray::Array1<f64>| d.iter().copied().fold(0.0, f64::max);
    writeln!(out, "{stage}_t2v_norm_error,{}", t2v.mean().unwrap_or(0.0))?;
    writeln!(out, "{stage}_v2t_norm_error,{}", v2t.mean().unwrap_or(0.0))?;
    writeln!(out, "{stage}_t2v_max_error,{}", max(&t2v))?;
    writeln!(out, "{stage}_v2t_max_error,{}", max(&v2t))?;
    Ok(())
}

pub fn run(args: &NormalizeArgs) -> anyhow::Result<()> {
    let opts = args.scaling.options()?;
    let gamma = args.scaling.gamma;
    if args.prior == PriorKind::Counts && args.counts.is_none() {
        return Err(usage("--prior counts needs --counts FILE"));
    }
    let text = load_embeddings(&args.text, Modality::Text)?;
    let video = load_embeddings(&args.video, Modality::Video)?;
    let s = cosine_similarity_matrix(&text, &video)?;
    let prior = match (&args.prior, &args.counts) {
        (PriorKind::Counts, Some(path)) => {
            let counts = load_counts(path)?;
            if counts.len() != video.len() {
                return Err(crate::Failure::Data(format!(
                    "{}: {} counts for {} videos",
                    path.display(),
                    counts.len(),
                    video.len()
                ))
                .into());
            }
            MarginalPrior::from_item_counts(text.len(), &counts)?
        }
        _ => MarginalPrior::uniform(text.len(), video.len())?,
    };

    let (biases, scaling) = compute_biases_with_scaling(&s, gamma, &prior, &opts)?;
    let s_star = adjust_similarity(&s, &biases)?;

    let mut settings = vec![
        ("command".to_string(), "normalize".to_string()),
        ("text".into(), args.text.display().to_string()),
        ("video".into(), args.video.display().to_string()),
    ];
    settings.extend(args.scaling.settings());
    settings.push((
        "prior".into(),
        match &args.counts {
            Some(p) if args.prior == PriorKind::Counts => format!("counts:{}", p.display()),
            _ => "uniform".into(),
        },
    ));
    let header = header_line(&settings);

    let mut body = String::from("axis,index,bias\n");
    for (i, v) in biases.a.iter().enumerate() {
        writeln!(body, "text,{i},{v}")?;
    }
    for (j, v) in biases.b.iter().enumerate() {
        writeln!(body, "video,{j},{v}")?;
    }
    write_csv(&args.out.out, "biases.csv", &header, &body)?;

    let mut report = String::from("metric,value\n");
    error_rows(&s, gamma, &prior, "pre", &mut report)?;
    error_rows(&s_star, gamma, &prior, "post", &mut report)?;
    writeln!(report, "iterations,{}", scaling.iterations_run)?;
    writeln!(report, "residual,{}", scaling.residual)?;
    write_csv(&args.out.out, "normalization.csv", &header, &report)
}
