use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::Document;
use crate::error::{Error, Result};

/// Default hashed bag-of-words dimension.
pub const HASH_DIM: usize = 256;

/// A document id with its unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedDoc {
    pub id: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    /// Hashed bag-of-words of the given dimension. Bucket 0 is reserved for
    /// documents without any word.
    Hashed { dim: usize },
    /// Precomputed vectors, one row per document in corpus order.
    File(PathBuf),
}

impl Default for Embedder {
    fn default() -> Self {
        Embedder::Hashed { dim: HASH_DIM }
    }
}

fn bucket(word: &str, dim: usize) -> usize {
    // FNV-1a, then a multiplicative (Fibonacci) mix
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mixed = h.wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 32;
    1 + (mixed as usize) % (dim - 1)
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        false
    }
}

/// Lowercased alphanumeric words, counted into hashed buckets and L2
/// normalized. Returns `None` when the text has no words.
pub fn hashed_embedding(text: &str, dim: usize) -> Option<Vec<f64>> {
    let mut v = vec![0.0; dim];
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        v[bucket(&word.to_lowercase(), dim)] += 1.0;
    }
    normalize(&mut v).then_some(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn reserved(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

pub fn embed_documents(docs: &[Document], embedder: &Embedder) -> Result<Vec<EmbeddedDoc>> {
    if docs.is_empty() {
        return Err(Error::Data("cannot embed an empty corpus".into()));
    }
    let vectors: Vec<Vec<f64>> = match embedder {
        Embedder::Hashed { dim } => {
            if *dim < 2 {
                return Err(Error::config(
                    "embed_dim",
                    "hashed embeddings need at least 2 dimensions",
                ));
            }
            docs.iter()
                .map(|d| {
                    hashed_embedding(&d.text, *dim).unwrap_or_else(|| {
                        log::warn!("document `{}` has no words; using the reserved basis vector", d.id);
                        reserved(*dim)
                    })
                })
                .collect()
        }
        Embedder::File(path) => {
            let rows = load_embeddings(path)?;
            if rows.len() != docs.len() {
                return Err(Error::Data(format!(
                    "{} holds {} embeddings for {} documents",
                    path.display(),
                    rows.len(),
                    docs.len()
                )));
            }
            rows.into_iter()
                .zip(docs)
                .map(|(row, d)| {
                    let mut v: Vec<f64> = row.into_iter().map(f64::from).collect();
                    if !normalize(&mut v) {
                        log::warn!(
                            "document `{}` has a zero embedding; using the reserved basis vector",
                            d.id
                        );
                        v = reserved(v.len());
                    }
                    v
                })
                .collect()
        }
    };
    Ok(docs
        .iter()
        .zip(vectors)
        .map(|(d, vector)| EmbeddedDoc {
            id: d.id.clone(),
            vector,
        })
        .collect())
}

/// Embeddings file: `u32 count, u32 dim`, then `count × dim` f32, all LE.
pub fn write_embeddings(path: &Path, rows: &[Vec<f32>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Data("embedding rows differ in length".into()));
    }
    let mut buf = Vec::with_capacity(8 + rows.len() * dim * 4);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in rows.iter().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open embeddings {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let word = |i: usize| -> Option<u32> { Some(u32::from_le_bytes(bytes.get(i..i + 4)?.try_into().ok()?)) };
    let (count, dim) = match (word(0), word(4)) {
        (Some(c), Some(d)) => (c as usize, d as usize),
        _ => return Err(Error::Data(format!("{}: truncated embeddings header", path.display()))),
    };
    if bytes.len() != 8 + count * dim * 4 {
        return Err(Error::Data(format!(
            "{}: header declares {count}×{dim} floats but file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .take(count)
        .map(<[f32]>::to_vec)
        .collect())
}
