//! Pre-norm transformer language model whose FFN sublayers are banks of
//! SwiGLU experts merged in parameter space.

mod config;
mod ffn;
mod generate;
mod moe;
mod params;
mod transformer;

pub use config::{ModelConfig, RoutingMode};
pub use ffn::{merge_expert_tensors, merge_experts, swiglu_ffn, SIMPLEX_TOL};
pub use generate::{generate, GenerateOptions, Generation};
pub use moe::{expert_choice_forward, moe_layer_forward, MoeOutput};
pub use params::{ExpertBank, ExpertFfn, ExpertVars, LayerParams, LayerVars, ModelParams, ParamVars, INIT_STD};
pub use transformer::{eval_logits, forward, forward_batch, lm_loss, ForwardOptions, ForwardOutput, LayerTrace};
