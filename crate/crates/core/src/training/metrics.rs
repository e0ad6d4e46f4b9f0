use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Mean next-token cross-entropy of the batch, nats.
    pub loss: f64,
    pub lr: f64,
    /// Tokens consumed including this step.
    pub tokens: u64,
    pub mode: String,
}

/// Merging weights of one segment at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// Position of the instance within its batch.
    pub instance: usize,
    pub layer: usize,
    pub segment: usize,
    pub weights: Vec<f64>,
    /// Domain of the document covering most of the segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub eval_loss: f64,
    pub instances: usize,
}

/// Buffered line-delimited JSON writer.
pub struct JsonlWriter {
    inner: BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            inner: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Mean loss over the last `fraction` of the records (at least one record).
pub fn tail_mean_loss(records: &[MetricRecord], fraction: f64) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let n = ((records.len() as f64 * fraction).ceil() as usize).clamp(1, records.len());
    Some(records[records.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
}
