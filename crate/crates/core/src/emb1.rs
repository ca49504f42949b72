//! EMB1 binary embedding files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `EMB1`                       |
//! | 4      | 4    | `u32` N (rows)                     |
//! | 8      | 4    | `u32` D (dimension)                |
//! | 12     | 1    | `u8` modality (0 = text, 1 = video)|
//! | 13     | 3    | reserved, zero                     |
//! | 16     | 4·N·D| `f32` row-major payload            |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::embed::{EmbeddingSet, Modality};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;

/// Decoded contents of an EMB1 block. `rows` may be zero (empty queues).
#[derive(Debug, Clone, PartialEq)]
pub struct Emb1Block {
    pub modality: Modality,
    pub vectors: Array2<f64>,
}

pub fn write_block<W: Write>(w: &mut W, modality: Modality, vectors: ArrayView2<f64>) -> Result<()> {
    let n = u32::try_from(vectors.nrows())
        .map_err(|_| Error::Format(format!("too many rows: {}", vectors.nrows())))?;
    let d = u32::try_from(vectors.ncols())
        .map_err(|_| Error::Format(format!("dimension too large: {}", vectors.ncols())))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(MAGIC);
    header[4..8].copy_from_slice(&n.to_le_bytes());
    header[8..12].copy_from_slice(&d.to_le_bytes());
    header[12] = modality.code();
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(vectors.len() * 4);
    for row in vectors.outer_iter() {
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads exactly one EMB1 block, leaving anything after the payload unread.
pub fn read_block<R: Read>(r: &mut R) -> Result<Emb1Block> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or(r, &mut header, "truncated header")?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"EMB1\"",
            String::from_utf8_lossy(&header[0..4])
        )));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let modality = Modality::from_code(header[12])
        .ok_or_else(|| Error::Format(format!("unknown modality code {}", header[12])))?;
    if header[13..16] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    if d == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }
    let len = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::Format(format!(
            "truncated payload: expected {len} bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let vectors = Array2::from_shape_vec((n, d), data).expect("payload length checked");
    Ok(Emb1Block { modality, vectors })
}

pub fn write_embeddings<W: Write>(w: &mut W, set: &EmbeddingSet) -> Result<()> {
    write_block(w, set.modality(), set.vectors())
}

/// Reads an EMB1 stream holding a non-empty set and nothing else.
pub fn read_embeddings<R: Read>(r: &mut R) -> Result<EmbeddingSet> {
    let block = read_block(r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    if block.vectors.nrows() == 0 {
        return Err(Error::Format("file holds zero embeddings".into()));
    }
    EmbeddingSet::new(block.modality, block.vectors)
}

pub fn save<P: AsRef<Path>>(path: P, set: &EmbeddingSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<EmbeddingSet> {
    let mut r = BufReader::new(File::open(path)?);
    read_embeddings(&mut r)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(what.to_string()),
        _ => Error::Io(e),
    })
}
