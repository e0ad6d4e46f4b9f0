use std::ops::Range;

use super::ffn::swiglu_ffn;
use super::moe::{expert_choice_forward, moe_layer_forward};
use super::params::{LayerVars, ModelParams, ParamVars};
use super::{ModelConfig, RoutingMode};
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::routing::{
    causal_segment_weights, expert_choice, prefix_routing, prompt_routing, split_segments, top_k_per_unit, RoutingPlan,
};

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Overrides the configured routing mode.
    pub mode: Option<RoutingMode>,
    /// Fixed merging weights per layer, applied to every position.
    pub frozen: Option<Vec<Vec<f64>>>,
    /// Expert Choice layers route each unit to its top-1 expert instead of
    /// selecting across the batch.
    pub ec_inference: bool,
    /// Causal mode only: replaces each layer's detached segment-1 weights by
    /// these constants. Finite-difference checks use it to hold the
    /// stop-gradient branch fixed.
    pub pinned_first: Option<Vec<Vec<f64>>>,
}

impl ForwardOptions {
    pub fn with_mode(mode: RoutingMode) -> Self {
        ForwardOptions {
            mode: Some(mode),
            ..Default::default()
        }
    }
}

/// What one MoE layer did for one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    /// Merging weights per segment (one row when shared); for Expert Choice,
    /// the routing scores per unit.
    pub weights: Vec<Vec<f64>>,
    pub merges: usize,
    /// Expert Choice only: experts that selected each unit.
    pub ec_experts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `len × V` next-token logits.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_length {
        return Err(Error::Contract(format!(
            "sequence of {} tokens exceeds context length {}",
            tokens.len(),
            cfg.context_length
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn attention<S: Scalar>(g: &mut Graph<S>, x: Var, lv: &LayerVars, cfg: &ModelConfig) -> Result<Var> {
    let xn = g.rmsnorm(x, lv.attn_norm)?;
    let q = g.matmul(xn, lv.wq)?;
    let k = g.matmul(xn, lv.wk)?;
    let v = g.matmul(xn, lv.wv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let probs = g.causal_softmax(scores)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let att = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let o = g.matmul(att, lv.wo)?;
    g.add(x, o)
}

fn router_of(lv: &LayerVars, layer: usize) -> Result<Var> {
    lv.router.ok_or_else(|| {
        Error::Contract(format!(
            "layer {layer} has no router; dense parameters need dense routing"
        ))
    })
}

/// Forward pass of a single sequence.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    Ok(forward_batch(g, pv, cfg, &[tokens], opts)?.remove(0))
}

/// Forward pass of several sequences in one graph.
///
/// Sequences only interact in Expert Choice training mode, where experts
/// select units across the whole batch.
pub fn forward_batch<S: Scalar>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    seqs: &[&[usize]],
    opts: &ForwardOptions,
) -> Result<Vec<ForwardOutput>> {
    if seqs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for s in seqs {
        check_tokens(cfg, s)?;
    }
    let mode = opts.mode.unwrap_or(cfg.routing_mode);
    for f in [&opts.frozen, &opts.pinned_first].into_iter().flatten() {
        if f.len() != cfg.num_layers {
            return Err(Error::Contract(format!(
                "{} per-layer weight vectors for {} layers",
                f.len(),
                cfg.num_layers
            )));
        }
    }

    let mut xs = Vec::with_capacity(seqs.len());
    for s in seqs {
        let tok = g.embedding(pv.tok_emb, s)?;
        let positions: Vec<usize> = (0..s.len()).collect();
        let pos = g.embedding(pv.pos_emb, &positions)?;
        xs.push(g.add(tok, pos)?);
    }
    let mut traces: Vec<Vec<LayerTrace>> = vec![Vec::with_capacity(cfg.num_layers); seqs.len()];

    for (l, lv) in pv.layers.iter().enumerate() {
        let mut hs = Vec::with_capacity(seqs.len());
        for x in xs.iter_mut() {
            *x = attention(g, *x, lv, cfg)?;
            hs.push(g.rmsnorm(*x, lv.ffn_norm)?);
        }
        let outs: Vec<(Var, LayerTrace)> = if let Some(frozen) = &opts.frozen {
            let w = g.constant(Tensor::from_vec(
                frozen[l].iter().map(|&v| S::from_f64_lossy(v)).collect(),
            ));
            let plan = RoutingPlan::shared(w);
            hs.iter()
                .map(|&h| {
                    let layout = split_segments(g.shape(h)[0], cfg.segment_length);
                    let o = moe_layer_forward(g, h, &plan, &layout, &lv.experts)?;
                    Ok((
                        o.out,
                        LayerTrace {
                            weights: plan.values(g),
                            merges: o.merges,
                            ec_experts: Vec::new(),
                        },
                    ))
                })
                .collect::<Result<_>>()?
        } else {
            match mode {
                RoutingMode::Dense => hs
                    .iter()
                    .map(|&h| Ok((swiglu_ffn(g, h, &lv.experts[0])?, LayerTrace::default())))
                    .collect::<Result<_>>()?,
                RoutingMode::CausalSegment | RoutingMode::Prefix | RoutingMode::PromptOnly => {
                    let router = router_of(lv, l)?;
                    hs.iter()
                        .map(|&h| {
                            let layout = split_segments(g.shape(h)[0], cfg.segment_length);
                            let plan = match mode {
                                RoutingMode::CausalSegment => {
                                    let plan = causal_segment_weights(g, h, &layout, router)?;
                                    match &opts.pinned_first {
                                        Some(pins) => pin_first(g, plan, &pins[l]),
                                        None => plan,
                                    }
                                }
                                RoutingMode::Prefix => prefix_routing(g, h, &layout, router)?,
                                _ => RoutingPlan::shared(prompt_routing(g, h, router)?),
                            };
                            let o = moe_layer_forward(g, h, &plan, &layout, &lv.experts)?;
                            Ok((
                                o.out,
                                LayerTrace {
                                    weights: plan.values(g),
                                    merges: o.merges,
                                    ec_experts: Vec::new(),
                                },
                            ))
                        })
                        .collect::<Result<_>>()?
                }
                RoutingMode::EcSegment | RoutingMode::EcToken => {
                    expert_choice_layer(g, &hs, lv, l, cfg, mode, opts.ec_inference)?
                }
            }
        };
        for (i, (out, trace)) in outs.into_iter().enumerate() {
            xs[i] = g.add(xs[i], out)?;
            traces[i].push(trace);
        }
    }

    let mut outputs = Vec::with_capacity(seqs.len());
    for (x, layers) in xs.into_iter().zip(traces) {
        let xn = g.rmsnorm(x, pv.final_norm)?;
        let logits = g.matmul(xn, pv.lm_head)?;
        outputs.push(ForwardOutput { logits, layers });
    }
    Ok(outputs)
}

fn pin_first<S: Scalar>(g: &mut Graph<S>, plan: RoutingPlan, pin: &[f64]) -> RoutingPlan {
    let mut weights = plan.weights().to_vec();
    weights[0] = g.constant(Tensor::from_vec(pin.iter().map(|&v| S::from_f64_lossy(v)).collect()));
    RoutingPlan::per_segment(weights, plan.detached().to_vec())
}

fn expert_choice_layer<S: Scalar>(
    g: &mut Graph<S>,
    hs: &[Var],
    lv: &LayerVars,
    layer: usize,
    cfg: &ModelConfig,
    mode: RoutingMode,
    inference: bool,
) -> Result<Vec<(Var, LayerTrace)>> {
    let router = router_of(lv, layer)?;
    let lens: Vec<usize> = hs.iter().map(|&h| g.shape(h)[0]).collect();
    let offsets: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let h_all = if hs.len() == 1 { hs[0] } else { g.concat_rows(hs)? };

    // units per sequence, as global row ranges
    let mut unit_rows: Vec<Range<usize>> = Vec::new();
    let mut units_of_seq: Vec<Range<usize>> = Vec::with_capacity(hs.len());
    let scores = if mode == RoutingMode::EcToken {
        for (i, &n) in lens.iter().enumerate() {
            units_of_seq.push(unit_rows.len()..unit_rows.len() + n);
            unit_rows.extend((offsets[i]..offsets[i] + n).map(|r| r..r + 1));
        }
        let logits = g.matmul(h_all, router)?;
        g.softmax(logits)
    } else {
        // segment scores follow the causal shift of the merging router
        let mut rows = Vec::new();
        for (i, &h) in hs.iter().enumerate() {
            let layout = split_segments(lens[i], cfg.segment_length);
            let plan = causal_segment_weights(g, h, &layout, router)?;
            units_of_seq.push(unit_rows.len()..unit_rows.len() + layout.len());
            for (k, span) in layout.spans().iter().enumerate() {
                unit_rows.push(offsets[i] + span.start..offsets[i] + span.end);
                rows.push(g.reshape(plan.for_segment(k), &[1, cfg.num_experts])?);
            }
        }
        if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        }
    };
    let score_rows: Vec<Vec<f64>> = {
        let t = g.value(scores);
        (0..unit_rows.len())
            .map(|u| t.row(u).iter().map(|v| v.as_f64()).collect())
            .collect()
    };
    let assignment = if inference {
        top_k_per_unit(&score_rows, 1)
    } else {
        expert_choice(&score_rows, cfg.capacity_factor)?
    };
    let out_all = expert_choice_forward(g, h_all, scores, &unit_rows, &assignment, &lv.experts)?;

    let mut result = Vec::with_capacity(hs.len());
    for (i, &n) in lens.iter().enumerate() {
        let out = if hs.len() == 1 {
            out_all
        } else {
            g.slice_rows(out_all, offsets[i], offsets[i] + n)?
        };
        let units = units_of_seq[i].clone();
        let trace = LayerTrace {
            weights: score_rows[units.clone()].to_vec(),
            merges: 0,
            ec_experts: units
                .map(|u| assignment.experts_of(u).into_iter().map(|(e, _)| e).collect())
                .collect(),
        };
        result.push((out, trace));
    }
    Ok(result)
}

/// Mean next-token cross-entropy: row `t` of `logits` predicts `tokens[t+1]`;
/// the final row has no target.
pub fn lm_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, tokens: &[usize]) -> Result<Var> {
    let rows = g.shape(logits)[0];
    if rows != tokens.len() {
        return Err(Error::shape("lm_loss", g.shape(logits), &[tokens.len()]));
    }
    if tokens.len() < 2 {
        return Err(Error::Contract("lm_loss needs at least two tokens".into()));
    }
    let inputs = g.slice_rows(logits, 0, rows - 1)?;
    g.cross_entropy(inputs, &tokens[1..])
}

/// Logits and routing traces of one sequence, without gradients.
pub fn eval_logits<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Result<(Tensor<S>, Vec<LayerTrace>)> {
    let mut g = Graph::new();
    let pv = ParamVars::bind_frozen(&mut g, params);
    let out = forward(&mut g, &pv, &params.config, tokens, opts)?;
    Ok((g.value(out.logits).clone(), out.layers))
}
