use super::params::{ExpertFfn, ExpertVars};
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Tolerance on `Σ e_i = 1` for merging weights.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// SwiGLU feed-forward applied row-wise to `h` (`rows × d`).
pub fn swiglu_ffn<S: Scalar>(g: &mut Graph<S>, h: Var, ffn: &ExpertVars) -> Result<Var> {
    let gate = g.matmul(h, ffn.w_gate)?;
    let up = g.matmul(h, ffn.w_up)?;
    let act = g.silu(gate);
    let inner = g.mul(act, up)?;
    g.matmul(inner, ffn.w_down)
}

fn check_weights(values: &[f64], experts: usize) -> Result<()> {
    if values.len() != experts {
        return Err(Error::Contract(format!(
            "{} merging weights for {experts} experts",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("merging weights".into()));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!("merging weights sum to {total}, not 1")));
    }
    Ok(())
}

/// Parameter-space average `Σ e_i · θ_i` of the experts, inside the graph so
/// gradients reach both the weights and every expert.
pub fn merge_experts<S: Scalar>(g: &mut Graph<S>, weights: Var, experts: &[ExpertVars]) -> Result<ExpertVars> {
    let values: Vec<f64> = g.value(weights).data().iter().map(|v| v.as_f64()).collect();
    check_weights(&values, experts.len())?;
    let gates: Vec<Var> = experts.iter().map(|e| e.w_gate).collect();
    let ups: Vec<Var> = experts.iter().map(|e| e.w_up).collect();
    let downs: Vec<Var> = experts.iter().map(|e| e.w_down).collect();
    Ok(ExpertVars {
        w_gate: g.combine(weights, &gates)?,
        w_up: g.combine(weights, &ups)?,
        w_down: g.combine(weights, &downs)?,
    })
}

/// Merge of concrete expert tensors, outside any graph.
pub fn merge_expert_tensors<S: Scalar>(weights: &[f64], experts: &[ExpertFfn<S>]) -> Result<ExpertFfn<S>> {
    check_weights(weights, experts.len())?;
    let first = experts
        .first()
        .ok_or_else(|| Error::Contract("no experts to merge".into()))?;
    let mix = |pick: fn(&ExpertFfn<S>) -> &Tensor<S>| -> Result<Tensor<S>> {
        let shape = pick(first).shape().to_vec();
        let mut out = vec![S::zero(); pick(first).len()];
        for (w, e) in weights.iter().zip(experts) {
            let t = pick(e);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("merge_experts", &shape, t.shape()));
            }
            let w = S::from_f64_lossy(*w);
            for (o, &v) in out.iter_mut().zip(t.data()) {
                *o = *o + w * v;
            }
        }
        Tensor::new(shape, out)
    };
    Ok(ExpertFfn {
        w_gate: mix(|e| &e.w_gate)?,
        w_up: mix(|e| &e.w_up)?,
        w_down: mix(|e| &e.w_down)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind(g: &mut Graph<f64>, e: &ExpertFfn<f64>) -> ExpertVars {
        ExpertVars {
            w_gate: g.param(e.w_gate.clone()),
            w_up: g.param(e.w_up.clone()),
            w_down: g.param(e.w_down.clone()),
        }
    }

    fn random_expert(rng: &mut ChaCha8Rng, d: usize, f: usize) -> ExpertFfn<f64> {
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        ExpertFfn {
            w_gate: t(&[d, f]),
            w_up: t(&[d, f]),
            w_down: t(&[f, d]),
        }
    }

    #[test]
    fn zero_weights_or_zero_input_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let zero = bind(&mut g, &ExpertFfn::zeros(3, 5));
        let h = g.constant(Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)));
        let out = swiglu_ffn(&mut g, h, &zero).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let e = bind(&mut g, &random_expert(&mut rng, 3, 5));
        let h0 = g.constant(Tensor::zeros(&[2, 3]));
        let out = swiglu_ffn(&mut g, h0, &e).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_swiglu_by_hand() {
        let one = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let mut g = Graph::<f64>::new();
        let e = bind(
            &mut g,
            &ExpertFfn {
                w_gate: one.clone(),
                w_up: one.clone(),
                w_down: one,
            },
        );
        let h = g.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let out = swiglu_ffn(&mut g, h, &e).unwrap();
        // silu(2)·2 = 2/(1+e^-2)·2
        let expected = 2.0 / (1.0 + (-2.0f64).exp()) * 2.0;
        assert!((g.value(out).item() - expected).abs() < 1e-12);
        assert!((expected - 3.5232).abs() < 1e-4);
    }

    #[test]
    fn merge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let experts: Vec<ExpertFfn<f64>> = (0..4).map(|_| random_expert(&mut rng, 3, 4)).collect();
        assert_eq!(merge_expert_tensors(&[1.0], &experts[..1]).unwrap(), experts[0]);
        let onehot = merge_expert_tensors(&[0.0, 0.0, 1.0, 0.0], &experts).unwrap();
        assert_eq!(onehot, experts[2]);

        let s = |v: f64| Tensor::from_rows(&[vec![v]]).unwrap();
        let toy = |v: f64| ExpertFfn {
            w_gate: s(v),
            w_up: s(v),
            w_down: s(v),
        };
        let merged = merge_expert_tensors(&[0.3, 0.7], &[toy(1.0), toy(3.0)]).unwrap();
        assert!((merged.w_gate.item() - 2.4).abs() < 1e-12);

        let uniform = merge_expert_tensors(&[0.25; 4], &experts).unwrap();
        for (i, v) in uniform.w_up.data().iter().enumerate() {
            let mean = experts.iter().map(|e| e.w_up.data()[i]).sum::<f64>() / 4.0;
            assert!((v - mean).abs() < 1e-7);
        }
    }

    #[test]
    fn merge_rejects_bad_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let experts: Vec<ExpertFfn<f64>> = (0..2).map(|_| random_expert(&mut rng, 2, 2)).collect();
        assert!(merge_expert_tensors(&[1.0], &experts).is_err());
        assert!(merge_expert_tensors(&[0.5, 0.6], &experts).is_err());
        assert!(merge_expert_tensors(&[f64::NAN, 1.0], &experts).is_err());
    }

    #[test]
    fn graph_merge_matches_tensor_merge_and_reaches_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let experts: Vec<ExpertFfn<f64>> = (0..3).map(|_| random_expert(&mut rng, 3, 4)).collect();
        let w = [0.2, 0.5, 0.3];
        let mut g = Graph::<f64>::new();
        let vars: Vec<ExpertVars> = experts.iter().map(|e| bind(&mut g, e)).collect();
        let wv = g.param(Tensor::from_vec(w.to_vec()));
        let merged = merge_experts(&mut g, wv, &vars).unwrap();
        let reference = merge_expert_tensors(&w, &experts).unwrap();
        assert!(g.value(merged.w_down).max_abs_diff(&reference.w_down) < 1e-15);
        let h = g.constant(Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0)));
        let out = swiglu_ffn(&mut g, h, &merged).unwrap();
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(wv).unwrap().iter().any(|&v| v != 0.0));
        for e in &vars {
            assert!(grads.get(e.w_gate).unwrap().iter().any(|&v| v != 0.0));
        }
    }
}
