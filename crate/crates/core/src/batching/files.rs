use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BatchMode, InstanceSet, Provenance, TrainingInstance};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MLINST01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    seq_len: usize,
    vocab_size: usize,
    mode: BatchMode,
    seed: u64,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct ProvLine {
    instance: usize,
    spans: Vec<Provenance>,
}

/// Path of the provenance sidecar written next to an instances file.
pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.jsonl");
    PathBuf::from(s)
}

/// Instances file: `MLINST01`, u32 LE header length, JSON header, then every
/// token as u32 LE. Provenance goes to `<path>.prov.jsonl`, one line per
/// instance.
pub fn write_instances(path: &Path, set: &InstanceSet) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        seq_len: set.seq_len,
        vocab_size: set.vocab_size,
        mode: set.mode,
        seed: set.seed,
        count: set.instances.len(),
    })?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for inst in &set.instances {
        for &t in &inst.tokens {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
    }
    w.flush()?;

    let mut p = BufWriter::new(std::fs::File::create(provenance_path(path))?);
    for (i, inst) in set.instances.iter().enumerate() {
        serde_json::to_writer(
            &mut p,
            &ProvLine {
                instance: i,
                spans: inst.provenance.clone(),
            },
        )?;
        p.write_all(b"\n")?;
    }
    p.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<InstanceSet> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| bad(format!("cannot open instances file: {e}")))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not an instances file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12 + hlen;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..body_start)
            .ok_or_else(|| bad("truncated header".into()))?,
    )
    .map_err(|e| bad(format!("bad header: {e}")))?;
    let body = &bytes[body_start..];
    if body.len() != header.count * header.seq_len * 4 {
        return Err(bad(format!(
            "header declares {} instances of {} tokens but body has {} bytes",
            header.count,
            header.seq_len,
            body.len()
        )));
    }
    let tokens: Vec<usize> = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(&t) = tokens.iter().find(|&&t| t >= header.vocab_size) {
        return Err(bad(format!("token {t} outside vocabulary of {}", header.vocab_size)));
    }

    let prov_path = provenance_path(path);
    let file = std::fs::File::open(&prov_path)
        .map_err(|e| Error::Data(format!("cannot open provenance {}: {e}", prov_path.display())))?;
    let mut spans = Vec::with_capacity(header.count);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let rec: ProvLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: prov_path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.instance != i {
            return Err(Error::Parse {
                path: prov_path.display().to_string(),
                line: i + 1,
                msg: format!("expected instance {i}, found {}", rec.instance),
            });
        }
        spans.push(rec.spans);
    }
    if spans.len() != header.count {
        return Err(Error::Data(format!(
            "{} lists {} instances, expected {}",
            prov_path.display(),
            spans.len(),
            header.count
        )));
    }
    let instances = tokens
        .chunks(header.seq_len.max(1))
        .zip(spans)
        .map(|(t, provenance)| TrainingInstance {
            tokens: t.to_vec(),
            provenance,
        })
        .collect();
    Ok(InstanceSet {
        seq_len: header.seq_len,
        vocab_size: header.vocab_size,
        mode: header.mode,
        seed: header.seed,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{pack_instances, ByteTokenizer, Document};

    #[test]
    fn round_trip_and_corruption() {
        let docs: Vec<Document> = (0..4)
            .map(|i| Document {
                id: format!("d{i}"),
                text: "hello world ".repeat(i + 1),
                domain: (i % 2 == 0).then(|| "even".to_string()),
            })
            .collect();
        let set = pack_instances(&docs, &[3, 1, 0, 2], &ByteTokenizer, 10, BatchMode::Sim, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.bin");
        write_instances(&path, &set).unwrap();
        assert_eq!(read_instances(&path).unwrap(), set);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_instances(&path).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_instances(&path).is_err());
    }
}
