use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::diffcore::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of freshly initialized weight matrices and routers.
pub const INIT_STD: f64 = 0.02;

/// One SwiGLU expert: `down(silu(h·gate) ⊙ (h·up))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFfn<S> {
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

/// The experts of one MoE layer together with its router.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<S> {
    pub experts: Vec<ExpertFfn<S>>,
    /// `d × E` linear map without bias; absent for dense layers.
    pub router: Option<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ffn_norm: Tensor<S>,
    pub bank: ExpertBank<S>,
}

/// Every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Tensor<S>,
    pub lm_head: Tensor<S>,
}

fn normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::from_f64_lossy(dist.sample(rng)))
}

impl<S: Scalar> ExpertFfn<S> {
    pub fn random(rng: &mut impl Rng, d: usize, ffn: usize, down_std: f64) -> Self {
        ExpertFfn {
            w_gate: normal(rng, &[d, ffn], INIT_STD),
            w_up: normal(rng, &[d, ffn], INIT_STD),
            w_down: normal(rng, &[ffn, d], down_std),
        }
    }

    pub fn zeros(d: usize, ffn: usize) -> Self {
        ExpertFfn {
            w_gate: Tensor::zeros(&[d, ffn]),
            w_up: Tensor::zeros(&[d, ffn]),
            w_down: Tensor::zeros(&[ffn, d]),
        }
    }

    pub fn matrices(&self) -> [&Tensor<S>; 3] {
        [&self.w_gate, &self.w_up, &self.w_down]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    /// Largest elementwise distance between two experts.
    pub fn max_abs_diff(&self, other: &ExpertFfn<S>) -> f64 {
        self.matrices()
            .iter()
            .zip(other.matrices())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

impl<S: Scalar> ExpertBank<S> {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters: weights `N(0, 0.02)`, output projections scaled by
    /// `1/sqrt(2·layers)`, norm gains at one.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, v, f) = (config.model_dim, config.vocab_size, config.ffn_dim);
        let out_std = INIT_STD / ((2 * config.num_layers) as f64).sqrt();
        let tok_emb = normal(rng, &[v, d], INIT_STD);
        let pos_emb = normal(rng, &[config.context_length, d], INIT_STD);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let wq = normal(rng, &[d, d], INIT_STD);
            let wk = normal(rng, &[d, d], INIT_STD);
            let wv = normal(rng, &[d, d], INIT_STD);
            let wo = normal(rng, &[d, d], out_std);
            let experts = (0..config.num_experts)
                .map(|_| ExpertFfn::random(rng, d, f, out_std))
                .collect();
            let router = (config.routing_mode != super::RoutingMode::Dense)
                .then(|| normal(rng, &[d, config.num_experts], INIT_STD));
            layers.push(LayerParams {
                attn_norm: Tensor::filled(&[d], S::one()),
                wq,
                wk,
                wv,
                wo,
                ffn_norm: Tensor::filled(&[d], S::one()),
                bank: ExpertBank { experts, router },
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::filled(&[d], S::one()),
            lm_head: normal(rng, &[d, v], INIT_STD),
        })
    }

    /// All tensors with their canonical names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layers.{l}.wq"), &layer.wq));
            out.push((format!("layers.{l}.wk"), &layer.wk));
            out.push((format!("layers.{l}.wv"), &layer.wv));
            out.push((format!("layers.{l}.wo"), &layer.wo));
            out.push((format!("layers.{l}.ffn_norm"), &layer.ffn_norm));
            for (e, ex) in layer.bank.experts.iter().enumerate() {
                out.push((format!("layers.{l}.experts.{e}.w_gate"), &ex.w_gate));
                out.push((format!("layers.{l}.experts.{e}.w_up"), &ex.w_up));
                out.push((format!("layers.{l}.experts.{e}.w_down"), &ex.w_down));
            }
            if let Some(r) = &layer.bank.router {
                out.push((format!("layers.{l}.router"), r));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.ffn_norm);
            for ex in &mut layer.bank.experts {
                out.push(&mut ex.w_gate);
                out.push(&mut ex.w_up);
                out.push(&mut ex.w_down);
            }
            if let Some(r) = &mut layer.bank.router {
                out.push(r);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn num_tensors(&self) -> usize {
        self.named().len()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters in one merged model: a single FFN per layer.
    pub fn active_scalars(&self) -> usize {
        let per_expert: usize = self
            .layers
            .first()
            .map_or(0, |l| l.bank.experts[0].matrices().iter().map(|m| m.len()).sum());
        let extra_experts = self.config.num_experts.saturating_sub(1);
        self.num_scalars() - self.layers.len() * extra_experts * per_expert
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        let cast_ffn = |e: &ExpertFfn<S>| ExpertFfn {
            w_gate: e.w_gate.cast(),
            w_up: e.w_up.cast(),
            w_down: e.w_down.cast(),
        };
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    bank: ExpertBank {
                        experts: l.bank.experts.iter().map(cast_ffn).collect(),
                        router: l.bank.router.as_ref().map(Tensor::cast),
                    },
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let mut template = ModelParams::<S>::zeros(config)?;
        let expected = template.num_tensors();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        for ((slot, t), name) in template.tensors_mut().into_iter().zip(tensors).zip(names) {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(template)
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, v, f) = (config.model_dim, config.vocab_size, config.ffn_dim);
        let layer = LayerParams {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ffn_norm: Tensor::zeros(&[d]),
            bank: ExpertBank {
                experts: vec![ExpertFfn::zeros(d, f); config.num_experts],
                router: (config.routing_mode != super::RoutingMode::Dense)
                    .then(|| Tensor::zeros(&[d, config.num_experts])),
            },
        };
        Ok(ModelParams {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[v, d]),
            pos_emb: Tensor::zeros(&[config.context_length, d]),
            layers: vec![layer; config.num_layers],
            final_norm: Tensor::zeros(&[d]),
            lm_head: Tensor::zeros(&[d, v]),
        })
    }
}

/// Graph handles for one expert.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub experts: Vec<ExpertVars>,
    pub router: Option<Var>,
}

/// Graph handles mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub lm_head: Var,
    order: Vec<Var>,
}

impl ParamVars {
    /// Registers every tensor as a trainable leaf.
    pub fn bind<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>) -> Self {
        Self::bind_with(params, |t| g.param(t.clone()))
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>) -> Self {
        Self::bind_with(params, |t| g.constant(t.clone()))
    }

    /// Uses already-registered leaves given in canonical order.
    pub fn from_vars<S: Scalar>(params: &ModelParams<S>, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        Self::bind_with(params, |_| it.next().expect("one var per tensor"))
    }

    fn bind_with<S: Scalar>(params: &ModelParams<S>, mut leaf: impl FnMut(&Tensor<S>) -> Var) -> Self {
        let mut order = Vec::new();
        let mut take = |t: &Tensor<S>| {
            let v = leaf(t);
            order.push(v);
            v
        };
        let tok_emb = take(&params.tok_emb);
        let pos_emb = take(&params.pos_emb);
        let mut layers = Vec::new();
        for l in &params.layers {
            let attn_norm = take(&l.attn_norm);
            let wq = take(&l.wq);
            let wk = take(&l.wk);
            let wv = take(&l.wv);
            let wo = take(&l.wo);
            let ffn_norm = take(&l.ffn_norm);
            let experts = l
                .bank
                .experts
                .iter()
                .map(|e| ExpertVars {
                    w_gate: take(&e.w_gate),
                    w_up: take(&e.w_up),
                    w_down: take(&e.w_down),
                })
                .collect();
            let router = l.bank.router.as_ref().map(&mut take);
            layers.push(LayerVars {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                experts,
                router,
            });
        }
        let final_norm = take(&params.final_norm);
        let lm_head = take(&params.lm_head);
        ParamVars {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
            order,
        }
    }

    /// Leaves in canonical order, matching [`ModelParams::named`].
    pub fn in_order(&self) -> &[Var] {
        &self.order
    }
}
