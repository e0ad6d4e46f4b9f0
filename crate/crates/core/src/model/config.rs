use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How each MoE layer obtains its merging weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Segment `k` is processed by experts merged from segment `k-1`'s mean state.
    CausalSegment,
    /// One merge from the first segment, reused for the whole sequence.
    Prefix,
    /// One merge from the mean over every given position (inference).
    PromptOnly,
    /// Expert Choice over segments, sparse and unmerged.
    EcSegment,
    /// Expert Choice over tokens, sparse and unmerged.
    EcToken,
    /// Plain transformer with a single FFN and no router.
    Dense,
}

impl RoutingMode {
    pub fn is_expert_choice(self) -> bool {
        matches!(self, RoutingMode::EcSegment | RoutingMode::EcToken)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::CausalSegment => "causal_segment",
            RoutingMode::Prefix => "prefix",
            RoutingMode::PromptOnly => "prompt_only",
            RoutingMode::EcSegment => "ec_segment",
            RoutingMode::EcToken => "ec_token",
            RoutingMode::Dense => "dense",
        }
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config("routing_mode", format!("unknown routing mode `{s}`")))
    }
}

/// Architecture and routing hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub context_length: usize,
    pub segment_length: usize,
    pub num_experts: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub routing_mode: RoutingMode,
    #[serde(default = "default_capacity_factor")]
    pub capacity_factor: f64,
}

fn default_capacity_factor() -> f64 {
    1.0
}

impl ModelConfig {
    /// The small configuration used by gradient and invariant checks.
    pub fn tiny() -> Self {
        ModelConfig {
            context_length: 16,
            segment_length: 4,
            num_experts: 4,
            num_layers: 2,
            model_dim: 16,
            ffn_dim: 32,
            num_heads: 2,
            vocab_size: 64,
            routing_mode: RoutingMode::CausalSegment,
            capacity_factor: 1.0,
        }
    }

    /// Number of segments in a full-length instance, `⌈L/T⌉`.
    pub fn num_segments(&self) -> usize {
        self.context_length.div_ceil(self.segment_length)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// The parameter-matched dense counterpart (one FFN per layer, no router).
    pub fn dense_counterpart(&self) -> Self {
        ModelConfig {
            num_experts: 1,
            routing_mode: RoutingMode::Dense,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("context_length", self.context_length),
            ("segment_length", self.segment_length),
            ("num_experts", self.num_experts),
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.segment_length > self.context_length {
            return Err(Error::config(
                "segment_length",
                format!(
                    "segment length {} exceeds context length {}",
                    self.segment_length, self.context_length
                ),
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("model_dim {} not divisible by {} heads", self.model_dim, self.num_heads),
            ));
        }
        if self.routing_mode == RoutingMode::Dense && self.num_experts != 1 {
            return Err(Error::config(
                "num_experts",
                "dense routing requires exactly one expert",
            ));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return Err(Error::config("capacity_factor", "must be positive and finite"));
        }
        Ok(())
    }

    /// Names the first field that differs from `other`.
    pub fn first_mismatch(&self, other: &ModelConfig) -> Option<&'static str> {
        let checks: [(&'static str, bool); 10] = [
            ("context_length", self.context_length == other.context_length),
            ("segment_length", self.segment_length == other.segment_length),
            ("num_experts", self.num_experts == other.num_experts),
            ("num_layers", self.num_layers == other.num_layers),
            ("model_dim", self.model_dim == other.model_dim),
            ("ffn_dim", self.ffn_dim == other.ffn_dim),
            ("num_heads", self.num_heads == other.num_heads),
            ("vocab_size", self.vocab_size == other.vocab_size),
            ("routing_mode", self.routing_mode == other.routing_mode),
            ("capacity_factor", self.capacity_factor == other.capacity_factor),
        ];
        checks.iter().find(|(_, ok)| !ok).map(|(name, _)| *name)
    }
}
