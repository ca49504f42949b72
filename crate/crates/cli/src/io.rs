//! File inputs and CSV outputs.

use std::fs;
use std::path::Path;

use anyhow::Context;
use ndarray::Array1;
use nclkit::emb1;
use nclkit::queue::QueryQueue;
use nclkit::{l2_normalize, BiasVectors, EmbeddingSet, GroundTruth, Modality};

use crate::Failure;

fn data_err(msg: String) -> anyhow::Error {
    Failure::Data(msg).into()
}

/// Loads an EMB1 file and rescales every row to unit length.
pub fn load_embeddings(path: &Path, modality: Modality) -> anyhow::Result<EmbeddingSet> {
    let set = emb1::load(path).with_context(|| format!("reading {}", path.display()))?;
    if set.modality() != modality {
        return Err(data_err(format!(
            "{}: expected {modality} embeddings, file holds {}",
            path.display(),
            set.modality()
        )));
    }
    l2_normalize(set.vectors(), modality).with_context(|| format!("normalizing {}", path.display()))
}

/// Query set for test-time normalization: a saved queue or a plain EMB1 file.
pub fn load_queries(path: &Path, modality: Modality) -> anyhow::Result<EmbeddingSet> {
    match QueryQueue::load(path) {
        Ok(q) if q.modality() == modality => Ok(q.snapshot()?),
        Ok(q) => Err(data_err(format!(
            "{}: expected a {modality} queue, file holds {}",
            path.display(),
            q.modality()
        ))),
        Err(_) => load_embeddings(path, modality),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))
}

/// Data lines of a small CSV: skips blank lines, `#` comments and a
/// non-numeric first line (header). Yields `(line number, fields)`.
fn csv_rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    let mut first = true;
    text.lines().enumerate().filter_map(move |(n, line)| {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let is_header = first && fields.iter().all(|f| f.parse::<f64>().is_err());
        first = false;
        (!is_header).then_some((n + 1, fields))
    })
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, fields: &[&str], i: usize) -> anyhow::Result<T> {
    fields
        .get(i)
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| data_err(format!("{}:{line}: cannot parse field {}", path.display(), i + 1)))
}

/// `text,video` index pairs (0-based), one relevant pair per line.
pub fn load_ground_truth(path: &Path, n_text: usize, n_video: usize) -> anyhow::Result<GroundTruth> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (line, fields) in csv_rows(&text) {
        if fields.len() != 2 {
            return Err(data_err(format!("{}:{line}: expected text,video", path.display())));
        }
        let q: usize = field(path, line, &fields, 0)?;
        let i: usize = field(path, line, &fields, 1)?;
        if q >= n_text {
            return Err(data_err(format!(
                "{}:{line}: text index {q} out of range ({n_text} texts)",
                path.display()
            )));
        }
        pairs.push((q, i));
    }
    GroundTruth::from_pairs(n_text, n_video, &pairs).with_context(|| format!("in {}", path.display()))
}

/// Biases written by `normalize` (`axis,index,bias`).
pub fn load_biases(path: &Path, n_text: usize, n_video: usize, gamma: f64) -> anyhow::Result<BiasVectors> {
    let text = read_text(path)?;
    let mut a = vec![None; n_text];
    let mut b = vec![None; n_video];
    for (line, fields) in csv_rows(&text) {
        if fields.len() != 3 {
            return Err(data_err(format!("{}:{line}: expected axis,index,bias", path.display())));
        }
        let idx: usize = field(path, line, &fields, 1)?;
        let v: f64 = field(path, line, &fields, 2)?;
        let slot = match fields[0] {
            "text" => a.get_mut(idx),
            "video" => b.get_mut(idx),
            other => {
                return Err(data_err(format!("{}:{line}: unknown axis {other:?}", path.display())));
            }
        };
        *slot.ok_or_else(|| data_err(format!("{}:{line}: {} index {idx} out of range", path.display(), fields[0])))? =
            Some(v);
    }
    let complete = |v: Vec<Option<f64>>, axis: &str| -> anyhow::Result<Array1<f64>> {
        v.into_iter()
            .enumerate()
            .map(|(i, x)| x.ok_or_else(|| data_err(format!("{}: no {axis} bias for index {i}", path.display()))))
            .collect()
    };
    Ok(BiasVectors {
        a: complete(a, "text")?,
        b: complete(b, "video")?,
        gamma,
    })
}

/// One nonnegative number per line (a header line is allowed).
pub fn load_counts(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = read_text(path)?;
    csv_rows(&text)
        .map(|(line, fields)| field(path, line, &fields, fields.len() - 1))
        .collect()
}

/// `# nclkit <version> key=value ...`
pub fn header_line(settings: &[(String, String)]) -> String {
    let mut s = format!("# nclkit {}", nclkit::VERSION);
    for (k, v) in settings {
        s.push_str(&format!(" {k}={v}"));
    }
    s.push('\n');
    s
}

pub fn write_csv(dir: &Path, name: &str, header: &str, body: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, format!("{header}{body}")).map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
}
