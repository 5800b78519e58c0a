//! File formats: embedding collections (NDJSON and binary), trajectory
//! streams, and atomic artifact writes.
//!
//! Binary layout: magic `MEMPOTv1`, u32 LE record count, u32 LE
//! dimension, count*dim f32 LE components, then count pot-flag bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{MempotError, Result};
use crate::simulate::{Trajectory, TrajectoryLabel, TrajectorySource};

pub const BINARY_MAGIC: &[u8; 8] = b"MEMPOTv1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: EmbeddingVector,
    #[serde(default)]
    pub is_pot: bool,
}

fn malformed(path: &Path, reason: impl Into<String>) -> MempotError {
    MempotError::MalformedFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Load an embedding collection, sniffing binary vs NDJSON by magic.
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 8];
    let n = read_up_to(&mut file, &mut head)?;
    if n == 8 && &head == BINARY_MAGIC {
        read_embeddings_binary_body(&mut file, path)
    } else {
        drop(file);
        read_embeddings_ndjson(path)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

fn read_embeddings_ndjson(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| malformed(path, format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

fn read_embeddings_binary_body(file: &mut File, path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut header = [0u8; 8];
    if read_up_to(file, &mut header)? != 8 {
        return Err(malformed(path, "truncated header"));
    }
    let count = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if dim == 0 && count > 0 {
        return Err(malformed(path, "zero dimension with nonzero count"));
    }
    let mut body = Vec::new();
    file.read_to_end(&mut body)?;
    let expect = count * dim * 4 + count;
    if body.len() != expect {
        return Err(malformed(
            path,
            format!("expected {expect} body bytes, found {}", body.len()),
        ));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut comps = Vec::with_capacity(dim);
        for j in 0..dim {
            let off = (i * dim + j) * 4;
            let bits: [u8; 4] = body[off..off + 4].try_into().unwrap();
            comps.push(f32::from_le_bytes(bits) as f64);
        }
        let flag = body[count * dim * 4 + i];
        let is_pot = match flag {
            0 => false,
            1 => true,
            other => return Err(malformed(path, format!("record {i}: bad pot flag {other}"))),
        };
        let vector = EmbeddingVector::new(comps)
            .map_err(|e| malformed(path, format!("record {i}: {e}")))?;
        records.push(EmbeddingRecord {
            id: format!("rec:{i}"),
            vector,
            is_pot,
        });
    }
    Ok(records)
}

pub fn write_embeddings_ndjson(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    atomic_write(path, |w| {
        for rec in records {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn write_embeddings_binary(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.vector.dim());
    if records.iter().any(|r| r.vector.dim() != dim) {
        return Err(MempotError::invalid_argument(
            "binary embedding file requires a single dimension",
        ));
    }
    let count = u32::try_from(records.len())
        .map_err(|_| MempotError::invalid_argument("too many records for binary format"))?;
    let dim32 = u32::try_from(dim)
        .map_err(|_| MempotError::invalid_argument("dimension too large for binary format"))?;
    atomic_write(path, |w| {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&dim32.to_le_bytes())?;
        for rec in records {
            for c in rec.vector.components() {
                w.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        for rec in records {
            w.write_all(&[u8::from(rec.is_pot)])?;
        }
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryLine {
    label: TrajectoryLabel,
    seed: u64,
    queries: Vec<EmbeddingVector>,
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TrajectoryLine = serde_json::from_str(&line)
            .map_err(|e| malformed(path, format!("line {}: {e}", lineno + 1)))?;
        if row.queries.is_empty() {
            return Err(malformed(path, format!("line {}: empty trajectory", lineno + 1)));
        }
        out.push(Trajectory {
            label: row.label,
            seed: row.seed,
            source: TrajectorySource::File,
            queries: row.queries,
        });
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    atomic_write(path, |w| {
        for t in trajectories {
            let row = TrajectoryLine {
                label: t.label,
                seed: t.seed,
                queries: t.queries.clone(),
            };
            serde_json::to_writer(&mut *w, &row)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Whitespace-separated numeric token ids, as used by the toy decoding
/// backends for safety lexicons and vocabularies.
pub fn read_token_file(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path)?;
    let tokens: Vec<u32> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| malformed(path, format!("token {t:?} is not a numeric id")))
        })
        .collect::<Result<_>>()?;
    if tokens.is_empty() {
        return Err(malformed(path, "no tokens"));
    }
    Ok(tokens)
}

/// Write through a temp file in the destination directory, then rename.
/// Readers never observe a partial artifact.
pub fn atomic_write(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> Result<()>,
) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    {
        let mut writer = BufWriter::new(&mut tmp);
        body(&mut writer)?;
        writer.flush()?;
    }
    tmp.persist(path).map_err(|e| MempotError::Io(e.error))?;
    Ok(())
}
