use serde::Serialize;

use crate::batching::TrainingInstance;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{eval_logits, ForwardOptions, ModelParams};
use crate::par::Executor;
use crate::training::majority_domain;

/// Label for instances without domain provenance.
pub const UNLABELED: &str = "unlabeled";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerplexityRow {
    pub group: String,
    pub instances: usize,
    /// Number of predicted tokens.
    pub tokens: usize,
    pub mean_loss: f64,
    pub perplexity: f64,
}

/// Next-token cross-entropy at every position `0..n-1`, computed in f64 with
/// a max-shifted log-sum-exp.
pub fn token_losses<S: crate::diffcore::Scalar>(logits: &Tensor<S>, tokens: &[usize]) -> Result<Vec<f64>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != tokens.len() {
        return Err(Error::Contract(format!(
            "logits of shape {shape:?} for {} tokens",
            tokens.len()
        )));
    }
    let v = shape[1];
    let data = logits.data();
    let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
    for (i, &target) in tokens.iter().enumerate().skip(1) {
        let row: Vec<f64> = data[(i - 1) * v..i * v].iter().map(|x| x.as_f64()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.push(lse - row[target]);
    }
    Ok(out)
}

/// Splits instances by the domain covering most of their tokens, in order of
/// first appearance.
pub fn group_by_domain(instances: &[TrainingInstance]) -> Vec<(String, Vec<TrainingInstance>)> {
    let mut groups: Vec<(String, Vec<TrainingInstance>)> = Vec::new();
    for inst in instances {
        let label = majority_domain(inst, 0..inst.tokens.len()).unwrap_or_else(|| UNLABELED.to_string());
        match groups.iter_mut().find(|(g, _)| *g == label) {
            Some((_, v)) => v.push(inst.clone()),
            None => groups.push((label, vec![inst.clone()])),
        }
    }
    groups
}

/// `exp(mean token cross-entropy)` of each group. Instances are evaluated
/// under the model's configured routing with no state carried between them.
pub fn perplexity<S: crate::diffcore::Scalar>(
    params: &ModelParams<S>,
    groups: &[(String, Vec<TrainingInstance>)],
    exec: &Executor,
) -> Result<Vec<PerplexityRow>> {
    let opts = ForwardOptions::default();
    let mut rows = Vec::with_capacity(groups.len());
    for (name, instances) in groups {
        if instances.is_empty() {
            return Err(Error::Data(format!("evaluation group `{name}` is empty")));
        }
        let losses = exec.try_map(instances, |_, inst| -> Result<Vec<f64>> {
            let (logits, _) = eval_logits(params, &inst.tokens, &opts)?;
            token_losses(&logits, &inst.tokens)
        })?;
        let tokens: usize = losses.iter().map(Vec::len).sum();
        if tokens == 0 {
            return Err(Error::Data(format!(
                "evaluation group `{name}` has no predicted tokens"
            )));
        }
        let mean = losses.iter().flatten().sum::<f64>() / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("evaluation loss of group `{name}`")));
        }
        rows.push(PerplexityRow {
            group: name.clone(),
            instances: instances.len(),
            tokens,
            mean_loss: mean,
            perplexity: mean.exp(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_case_by_hand() {
        // one prediction: logits (0, ln 3) for target 1 -> loss ln(4/3)
        let logits = Tensor::new(vec![2, 2], vec![0.0, 3f64.ln(), 9.0, 9.0]).unwrap();
        let l = token_losses(&logits, &[0, 1]).unwrap();
        assert_eq!(l.len(), 1);
        assert!((l[0] - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((l[0].exp() - 4.0 / 3.0).abs() < 1e-12);
        assert!(token_losses(&logits, &[0]).is_err());
    }
}
