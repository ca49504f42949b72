use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use nclkit::emb1;
use nclkit::synth::{generate_dataset, queue_size_sweep, sweep_csv, train_model, LossKind, RunRecord, TrainSetup};

use crate::io::{header_line, write_csv};
use crate::{config, usage, OutDir};

/// Keys that must be set by the config file or a flag.
const REQUIRED: &[&str] = &["seed"];

#[derive(Args, Debug)]
pub struct TrainFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss to train with: cl or ncl.
    #[arg(long)]
    pub loss: Option<String>,
    /// Seed for all randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Any config key, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(flatten)]
    pub out: OutDir,
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve(flags: &TrainFlags) -> anyhow::Result<TrainSetup> {
    let mut setup = TrainSetup::default();
    let mut given: Vec<String> = Vec::new();
    let mut apply = |setup: &mut TrainSetup, k: &str, v: &str| -> anyhow::Result<()> {
        setup.set(k, v)?;
        given.push(k.to_string());
        Ok(())
    };
    if let Some(path) = &flags.config {
        for (k, v) in config::load(path)? {
            apply(&mut setup, &k, &v)?;
        }
    }
    for kv in &flags.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(usage(format!("--set expects KEY=VALUE, got {kv:?}")));
        };
        apply(&mut setup, k.trim(), v.trim())?;
    }
    if let Some(l) = &flags.loss {
        apply(&mut setup, "loss", l)?;
    }
    if let Some(s) = flags.seed {
        apply(&mut setup, "seed", &s.to_string())?;
    }
    if let Some(e) = flags.epochs {
        apply(&mut setup, "epochs", &e.to_string())?;
    }
    for key in REQUIRED {
        if !given.iter().any(|g| g == key) {
            return Err(usage(format!("missing required config key `{key}` (set it in --config or pass --{key})")));
        }
    }
    setup.spec.validate()?;
    setup.config.validate()?;
    Ok(setup)
}

fn header(command: &str, setup: &TrainSetup) -> String {
    let mut settings = vec![("command".to_string(), command.to_string())];
    settings.extend(setup.entries().into_iter().map(|(k, v)| (k.to_string(), v)));
    header_line(&settings)
}

fn write_run(dir: &std::path::Path, header: &str, setup: &TrainSetup, record: &RunRecord) -> anyhow::Result<()> {
    write_csv(dir, "run.csv", header, &record.to_csv())?;
    write_csv(dir, "config.txt", header, &setup.echo())?;
    let mut body = String::from("metric,value\n");
    writeln!(body, "config_hash,{}", record.config_hash)?;
    if let Some(q) = &record.final_queue {
        writeln!(body, "text_queue_len,{}", q.text_queue_len)?;
        writeln!(body, "video_queue_len,{}", q.video_queue_len)?;
        writeln!(body, "total_pushed,{}", q.total_pushed)?;
        writeln!(body, "t2v_residual,{}", q.t2v_residual)?;
        writeln!(body, "v2t_residual,{}", q.v2t_residual)?;
    }
    write_csv(dir, "provenance.csv", header, &body)?;
    eprintln!("wall clock: {:.2?}", record.wall_clock);
    Ok(())
}

pub fn run_train(flags: &TrainFlags) -> anyhow::Result<()> {
    let setup = resolve(flags)?;
    let header = header("train", &setup);
    let dir = &flags.out.out;
    let keep_queues = setup.config.loss_kind == LossKind::Ncl;
    let (record, model) = train_model(&setup.spec, &setup.config, keep_queues)?;
    write_run(dir, &header, &setup, &record)?;

    // test-split embeddings and queues, ready for `eval`
    let data = generate_dataset(&setup.spec)?;
    let (text, video) = model.embed(&data.test)?;
    emb1::save(dir.join("test_text.emb1"), &text)?;
    emb1::save(dir.join("test_video.emb1"), &video)?;
    let mut gt = String::from("text,video\n");
    for (q, v) in data.test.caption_video.iter().enumerate() {
        writeln!(gt, "{q},{v}")?;
    }
    write_csv(dir, "test_gt.csv", &header, &gt)?;
    if let (Some(tq), Some(vq)) = (&model.text_queue, &model.video_queue) {
        tq.save(dir.join("text_queue.emb1q"))?;
        vq.save(dir.join("video_queue.emb1q"))?;
    }
    Ok(())
}

pub fn run_sweep(flags: &TrainFlags, sizes: &[usize]) -> anyhow::Result<()> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(usage("--sizes needs queue sizes ≥ 1"));
    }
    let setup = resolve(flags)?;
    let mut header = header("sweep", &setup);
    let listed: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
    header.insert_str(header.len() - 1, &format!(" sizes={}", listed.join(",")));
    let (record, rows) = queue_size_sweep(&setup.spec, &setup.config, sizes)?;
    write_run(&flags.out.out, &header, &setup, &record)?;
    write_csv(&flags.out.out, "sweep.csv", &header, &sweep_csv(&rows))
}
