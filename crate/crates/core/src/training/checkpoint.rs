use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState, Slot};
use super::{Phase, TrainPlan};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_FORMAT: &str = "moelab-checkpoint-1";
const PARAMS_FILE: &str = "params.bin";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements into the parameter file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotEntry {
    pub name: String,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// Architecture the run is training towards.
    pub target: ModelConfig,
    /// Architecture of the stored tensors (the dense counterpart during warmup).
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub phase: Phase,
    pub step: u64,
    /// Learning rate of the next update.
    pub next_lr: f64,
    pub tokens: u64,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: AdamWConfig,
    pub slots: Vec<SlotEntry>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Fails with the first field where the stored target differs from `expected`.
    pub fn expect_target(&self, expected: &ModelConfig) -> Result<()> {
        match self.manifest.target.first_mismatch(expected) {
            Some(field) => Err(Error::config(field, "checkpoint was trained with a different value")),
            None => Ok(()),
        }
    }
}

/// Writes `manifest.json`, `params.bin` (f32 LE, manifest order) and
/// `optimizer.bin` (f64 LE first then second moments, slot order) into `dir`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(ckpt.params.num_scalars() * 4);
    for (_, t) in ckpt.params.named() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(PARAMS_FILE), bytes)?;
    let mut bytes = Vec::new();
    for slot in &ckpt.optimizer.slots {
        for v in slot.m.iter().chain(&slot.v) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join(OPTIMIZER_FILE), bytes)?;
    let mut json = serde_json::to_vec_pretty(&ckpt.manifest)?;
    json.push(b'\n');
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Manifest entries for `params` in canonical order.
pub fn tensor_entries(params: &ModelParams<f32>) -> Vec<TensorEntry> {
    let mut offset = 0;
    params
        .named()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        std::fs::read(dir.join(name))
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", dir.join(name).display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest in {}: {e}", dir.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown checkpoint format `{}`",
            manifest.format
        )));
    }
    manifest.model.validate()?;

    let raw = read(PARAMS_FILE)?;
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if raw.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "{PARAMS_FILE} has {} bytes, manifest declares {} floats",
            raw.len(),
            total
        )));
    }
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the end of {PARAMS_FILE}", e.name)))?;
        tensors.push(Tensor::new(e.shape.clone(), data.to_vec())?);
    }
    let params = ModelParams::from_tensors(&manifest.model, tensors)?;
    for ((expected, _), e) in params.named().iter().zip(&manifest.tensors) {
        if *expected != e.name {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{expected}`, manifest lists `{}`",
                e.name
            )));
        }
    }

    let raw = read(OPTIMIZER_FILE)?;
    let lens: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    if manifest.slots.len() != lens.len() || raw.len() != lens.iter().sum::<usize>() * 16 {
        return Err(Error::Checkpoint(format!(
            "{OPTIMIZER_FILE} does not match the {} parameter tensors",
            lens.len()
        )));
    }
    let doubles: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut at = 0;
    let mut slots = Vec::with_capacity(lens.len());
    for (entry, &n) in manifest.slots.iter().zip(&lens) {
        slots.push(Slot {
            name: entry.name.clone(),
            m: doubles[at..at + n].to_vec(),
            v: doubles[at + n..at + 2 * n].to_vec(),
            t: entry.t,
        });
        at += 2 * n;
    }
    let optimizer = OptimizerState {
        config: manifest.optimizer,
        slots,
    };
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}
