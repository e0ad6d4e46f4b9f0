use serde::Serialize;

use crate::batching::TrainingInstance;
use crate::error::{Error, Result};
use crate::model::{eval_logits, ForwardOptions, ModelParams, RoutingMode};
use crate::par::Executor;
use crate::routing::split_segments;
use crate::training::TraceRecord;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainMean {
    pub domain: String,
    pub segments: usize,
    pub weights: Vec<f64>,
    pub argmax: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpecialization {
    pub layer: usize,
    pub domains: Vec<DomainMean>,
    /// Largest total-variation distance between any two domain means.
    pub max_tv: f64,
}

impl LayerSpecialization {
    /// Whether every domain prefers a different expert.
    pub fn distinct_argmax(&self) -> bool {
        let mut seen: Vec<usize> = self.domains.iter().map(|d| d.argmax).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len() == self.domains.len()
    }
}

/// `½·Σ|p_i − q_i|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Lowest index of the maximum.
pub fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = i;
        }
    }
    best
}

/// Per-layer mean routing vector of each domain (averaged per segment) and
/// the divergence between domains. Segments without a domain label are
/// skipped. `domains` fixes the expected labels and their order; `None` takes
/// them from the traces in sorted order.
pub fn specialization_report(traces: &[TraceRecord], domains: Option<&[String]>) -> Result<Vec<LayerSpecialization>> {
    let labels: Vec<String> = match domains {
        Some(d) => d.to_vec(),
        None => {
            let mut d: Vec<String> = traces.iter().filter_map(|t| t.domain.clone()).collect();
            d.sort();
            d.dedup();
            d
        }
    };
    if labels.len() < 2 {
        return Err(Error::Data(format!(
            "specialization needs at least 2 domains, found {}",
            labels.len()
        )));
    }
    let num_layers = traces.iter().map(|t| t.layer + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let mut means = Vec::with_capacity(labels.len());
        for label in &labels {
            let rows: Vec<&[f64]> = traces
                .iter()
                .filter(|t| t.layer == layer && t.domain.as_deref() == Some(label.as_str()))
                .map(|t| t.weights.as_slice())
                .collect();
            if rows.is_empty() {
                return Err(Error::Data(format!(
                    "domain `{label}` has no routed segments at layer {layer}"
                )));
            }
            let e = rows[0].len();
            let mut mean = vec![0.0; e];
            for r in &rows {
                if r.len() != e {
                    return Err(Error::Data(format!(
                        "layer {layer} traces disagree on the expert count"
                    )));
                }
                for (m, w) in mean.iter_mut().zip(*r) {
                    *m += w;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
            means.push(DomainMean {
                domain: label.clone(),
                segments: rows.len(),
                argmax: argmax(&mean),
                weights: mean,
            });
        }
        let mut max_tv = 0.0f64;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                max_tv = max_tv.max(total_variation(&means[i].weights, &means[j].weights));
            }
        }
        out.push(LayerSpecialization {
            layer,
            domains: means,
            max_tv,
        });
    }
    Ok(out)
}

/// Routing traces of `params` on labelled evaluation sets, one record per
/// (instance, layer, segment), under the model's merging mode (Expert Choice
/// models report their causal segment weights). Every segment of a set is
/// labelled with the set's name.
pub fn routing_traces<S: crate::diffcore::Scalar>(
    params: &ModelParams<S>,
    groups: &[(String, Vec<TrainingInstance>)],
    exec: &Executor,
) -> Result<Vec<TraceRecord>> {
    let cfg = &params.config;
    let mode = match cfg.routing_mode {
        m if m.is_expert_choice() => RoutingMode::CausalSegment,
        m => m,
    };
    let opts = ForwardOptions::with_mode(mode);
    let mut out = Vec::new();
    for (name, instances) in groups {
        if instances.is_empty() {
            return Err(Error::Data(format!("evaluation group `{name}` is empty")));
        }
        let traces = exec.try_map(instances, |_, inst| {
            eval_logits(params, &inst.tokens, &opts).map(|(_, t)| t)
        })?;
        for (i, (inst, layers)) in instances.iter().zip(traces).enumerate() {
            let spans = split_segments(inst.tokens.len(), cfg.segment_length);
            for (layer, t) in layers.into_iter().enumerate() {
                for k in 0..spans.len() {
                    let weights = match t.weights.len() {
                        0 => vec![1.0],
                        1 => t.weights[0].clone(),
                        _ => t.weights[k].clone(),
                    };
                    out.push(TraceRecord {
                        step: 0,
                        instance: i,
                        layer,
                        segment: k,
                        weights,
                        domain: Some(name.clone()),
                    });
                }
            }
        }
    }
    Ok(out)
}
