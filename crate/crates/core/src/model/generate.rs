use super::transformer::{eval_logits, ForwardOptions};
use super::{ModelParams, RoutingMode};
use crate::diffcore::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// Overrides the routing mode the model was trained with.
    pub mode: Option<RoutingMode>,
    /// Generation stops after emitting this token.
    pub stop_token: Option<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_new_tokens: 32,
            mode: None,
            stop_token: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Newly generated tokens, prompt excluded.
    pub tokens: Vec<usize>,
    /// Per-layer merging weights fixed from the prompt, in prompt-only mode.
    pub prompt_weights: Option<Vec<Vec<f64>>>,
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The context is windowed to the last `L` tokens.
///
/// Prompt-only routing decides each layer's merge once from the prompt and
/// keeps it for every generated token; the other modes re-route on the
/// growing context at every step.
pub fn generate<S: Scalar>(params: &ModelParams<S>, prompt: &[usize], opts: &GenerateOptions) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a nonempty prompt".into()));
    }
    let cfg = &params.config;
    let mode = opts.mode.unwrap_or(cfg.routing_mode);
    let window = |ctx: &[usize]| ctx[ctx.len().saturating_sub(cfg.context_length)..].to_vec();

    let mut fwd = ForwardOptions {
        mode: Some(mode),
        frozen: None,
        ec_inference: mode.is_expert_choice(),
        pinned_first: None,
    };
    let mut prompt_weights = None;
    if mode == RoutingMode::PromptOnly {
        let (_, traces) = eval_logits(params, &window(prompt), &fwd)?;
        let frozen: Vec<Vec<f64>> = traces.into_iter().map(|t| t.weights[0].clone()).collect();
        fwd.frozen = Some(frozen.clone());
        prompt_weights = Some(frozen);
    }

    let mut ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(opts.max_new_tokens);
    for _ in 0..opts.max_new_tokens {
        let (logits, _) = eval_logits(params, &window(&ctx), &fwd)?;
        let last = logits.row(logits.shape()[0] - 1);
        if !last.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("logits during generation".into()));
        }
        let next = argmax(last);
        ctx.push(next);
        out.push(next);
        if opts.stop_token == Some(next) {
            break;
        }
    }
    Ok(Generation {
        tokens: out,
        prompt_weights,
    })
}
