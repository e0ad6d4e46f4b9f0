use moelab_core::model::{ModelConfig, RoutingMode};
use moelab_core::training::TrainPlan;
use moelab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything `train` needs besides file paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
}

impl Default for RunConfig {
    /// The desk-scale recipe: 4 layers of width 128, 4 experts, 512-token
    /// instances cut into 64-token segments.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                context_length: 512,
                segment_length: 64,
                num_experts: 4,
                num_layers: 4,
                model_dim: 128,
                ffn_dim: 256,
                num_heads: 4,
                vocab_size: 258,
                routing_mode: RoutingMode::CausalSegment,
                capacity_factor: 1.0,
            },
            plan: TrainPlan {
                total_steps: 500,
                batch_size: 8 * 512,
                base_lr: 2e-3,
                ..TrainPlan::default()
            },
        }
    }
}

/// Merges `patch` into `base`; keys must already exist in `base`.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::config(sub, "unknown field")),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Applies one `dotted.key=value` override. The value is read as JSON when
/// it parses, otherwise as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::config(key, "unknown field"))?;
    }
    *slot = value;
    Ok(())
}

/// Defaults, then the optional config file, then overrides; the result is
/// fully validated.
pub fn load(file: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read config {path}: {e}")))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        merge(&mut value, patch, "")?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg = deserialize(value)?;
    cfg.model.validate()?;
    cfg.plan.validate(cfg.model.context_length)?;
    Ok(cfg)
}

/// Deserializes section by section so type errors name the offending section.
fn deserialize(value: Value) -> Result<RunConfig> {
    let Value::Object(mut map) = value else {
        return Err(Error::config("config", "must be a JSON object"));
    };
    let model = serde_json::from_value(map.remove("model").unwrap_or(Value::Null))
        .map_err(|e| Error::config("model", e.to_string()))?;
    let plan = serde_json::from_value(map.remove("plan").unwrap_or(Value::Null))
        .map_err(|e| Error::config("plan", e.to_string()))?;
    Ok(RunConfig { model, plan })
}
