//! Optimization loop: AdamW under a warmup-plus-cosine schedule, dense
//! warmup followed by expert duplication, checkpoints and metrics.

mod checkpoint;
mod metrics;
mod optim;
mod schedule;

use std::collections::HashMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, tensor_entries, Checkpoint, Manifest, SlotEntry, TensorEntry, CHECKPOINT_FORMAT,
};
pub use metrics::{read_jsonl, tail_mean_loss, EvalRecord, JsonlWriter, MetricRecord, TraceRecord};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimizerState, Slot};
pub use schedule::LrSchedule;

use crate::batching::{InstanceSet, TrainingInstance};
use crate::diffcore::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    forward, forward_batch, lm_loss, ForwardOptions, LayerTrace, ModelConfig, ModelParams, ParamVars, RoutingMode,
    INIT_STD,
};
use crate::par::Executor;
use crate::routing::split_segments;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub total_steps: u64,
    /// Tokens per step; a multiple of the context length.
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_fraction: f64,
    pub dense_warmup_fraction: f64,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Steps between held-out evaluations; zero disables them.
    pub eval_interval: u64,
    pub log_interval: u64,
    /// Steps between intermediate checkpoints; zero keeps only the final one.
    pub checkpoint_interval: u64,
    /// Steps between routing-trace dumps; zero disables tracing.
    pub trace_interval: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            total_steps: 1000,
            batch_size: 4096,
            base_lr: 2e-4,
            min_lr_ratio: 0.1,
            warmup_fraction: 0.05,
            dense_warmup_fraction: 0.05,
            grad_clip: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
            eval_interval: 0,
            log_interval: 1,
            checkpoint_interval: 0,
            trace_interval: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, context_length: usize) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be at least 1"));
        }
        for (field, v) in [
            ("warmup_fraction", self.warmup_fraction),
            ("dense_warmup_fraction", self.dense_warmup_fraction),
            ("min_lr_ratio", self.min_lr_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} is outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.batch_size % context_length != 0 {
            return Err(Error::config(
                "batch_size",
                format!(
                    "{} tokens is not a positive multiple of the context length {context_length}",
                    self.batch_size
                ),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config("base_lr", "must be finite and nonnegative"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be finite and nonnegative"));
        }
        let o = self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::config(
                "optimizer.eps",
                "eps must be positive and weight decay nonnegative",
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            min_lr_ratio: self.min_lr_ratio,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.total_steps,
        }
    }

    pub fn dense_steps(&self) -> u64 {
        (self.dense_warmup_fraction * self.total_steps as f64).round() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Training the dense counterpart before duplication.
    DenseWarmup,
    /// Training the target architecture.
    Main,
}

/// Fresh router weights for duplication.
fn router_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

fn is_expert_tensor(name: &str) -> bool {
    name.contains(".experts.") || name.ends_with(".router")
}

/// Builds target parameters from a trained dense model: every expert is a copy
/// of the dense FFN, routers are drawn from `N(0, 0.02)`, everything else is
/// carried over.
pub fn duplicate_dense<S: Scalar>(
    dense: &ModelParams<S>,
    target: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<ModelParams<S>> {
    let expected = target.dense_counterpart();
    if let Some(field) = dense.config.first_mismatch(&expected) {
        return Err(Error::config(
            field,
            "dense parameters do not match the target's dense counterpart",
        ));
    }
    let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
    let mut out = dense.clone();
    out.config = target.clone();
    for layer in &mut out.layers {
        let ffn = layer.bank.experts[0].clone();
        layer.bank.experts = vec![ffn; target.num_experts];
        layer.bank.router = (target.routing_mode != RoutingMode::Dense).then(|| {
            Tensor::from_fn(&[target.model_dim, target.num_experts], |_| {
                S::from_f64_lossy(rng.sample(normal))
            })
        });
    }
    Ok(out)
}

/// Optimizer state for `params`, keeping moments of non-expert tensors found
/// in `old` and starting expert-derived tensors afresh.
fn carry_moments(old: &OptimizerState, params: &ModelParams<f32>) -> OptimizerState {
    let by_name: HashMap<&str, &Slot> = old.slots.iter().map(|s| (s.name.as_str(), s)).collect();
    let slots = params
        .named()
        .iter()
        .map(|(name, t)| match by_name.get(name.as_str()) {
            Some(s) if !is_expert_tensor(name) && s.m.len() == t.len() => (*s).clone(),
            _ => Slot::fresh(name, t.len()),
        })
        .collect();
    OptimizerState {
        config: old.config,
        slots,
    }
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub metric: MetricRecord,
    pub traces: Vec<TraceRecord>,
    pub grad_norm: f64,
}

/// Mutable state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub target: ModelConfig,
    pub plan: TrainPlan,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub phase: Phase,
}

impl Trainer {
    pub fn new(target: &ModelConfig, plan: &TrainPlan) -> Result<Self> {
        target.validate()?;
        plan.validate(target.context_length)?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let warmup = target.routing_mode != RoutingMode::Dense;
        let (params, phase) = if warmup {
            let dense = ModelParams::init(&target.dense_counterpart(), &mut rng)?;
            if plan.dense_steps() == 0 {
                (
                    duplicate_dense(&dense, target, &mut router_rng(plan.seed))?,
                    Phase::Main,
                )
            } else {
                (dense, Phase::DenseWarmup)
            }
        } else {
            (ModelParams::init(target, &mut rng)?, Phase::Main)
        };
        let optimizer = OptimizerState::new(plan.optimizer, &params.named());
        Ok(Trainer {
            target: target.clone(),
            plan: plan.clone(),
            params,
            optimizer,
            step: 0,
            phase,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let m = ckpt.manifest;
        m.target.validate()?;
        m.plan.validate(m.target.context_length)?;
        Ok(Trainer {
            target: m.target,
            plan: m.plan,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            step: m.step,
            phase: m.phase,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let next_lr = if self.step < self.plan.total_steps {
            self.plan.schedule().lr_at(self.step + 1)?
        } else {
            0.0
        };
        Ok(Checkpoint {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.to_string(),
                target: self.target.clone(),
                model: self.params.config.clone(),
                plan: self.plan.clone(),
                phase: self.phase,
                step: self.step,
                next_lr,
                tokens: self.step * self.plan.batch_size as u64,
                tensors: tensor_entries(&self.params),
                optimizer: self.optimizer.config,
                slots: self
                    .optimizer
                    .slots
                    .iter()
                    .map(|s| SlotEntry {
                        name: s.name.clone(),
                        t: s.t,
                    })
                    .collect(),
            },
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        })
    }

    pub fn instances_per_step(&self) -> usize {
        self.plan.batch_size / self.target.context_length
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.total_steps
    }

    /// Instance indices of the batch for `step`: consecutive slices of a
    /// per-epoch permutation seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, step: u64, data_len: usize) -> Vec<usize> {
        let b = self.instances_per_step() as u64;
        let n = data_len as u64;
        let mut cache: Option<(u64, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / n;
                if cache.as_ref().map(|c| c.0) != Some(epoch) {
                    cache = Some((epoch, epoch_order(self.plan.seed, epoch, data_len)));
                }
                cache.as_ref().unwrap().1[(pos % n) as usize]
            })
            .collect()
    }

    fn mode(&self) -> RoutingMode {
        match self.phase {
            Phase::DenseWarmup => RoutingMode::Dense,
            Phase::Main => self.target.routing_mode,
        }
    }

    /// One optimizer step on the next batch. The step that completes the dense
    /// warmup also duplicates the dense FFN into the experts.
    pub fn step(&mut self, data: &InstanceSet, exec: &Executor) -> Result<StepResult> {
        let r = self.update(data, exec)?;
        if self.phase == Phase::DenseWarmup && self.step >= self.plan.dense_steps() {
            self.duplicate()?;
        }
        Ok(r)
    }

    fn update(&mut self, data: &InstanceSet, exec: &Executor) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::Contract("training plan already finished".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("no training instances".into()));
        }
        if data.seq_len != self.target.context_length {
            return Err(Error::config(
                "context_length",
                format!(
                    "model expects {} tokens, instances have {}",
                    self.target.context_length, data.seq_len
                ),
            ));
        }
        if data.vocab_size > self.target.vocab_size {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "instances use {} token ids, model has {}",
                    data.vocab_size, self.target.vocab_size
                ),
            ));
        }
        let batch: Vec<&TrainingInstance> = self
            .batch_indices(self.step, data.len())
            .into_iter()
            .map(|i| &data.instances[i])
            .collect();
        let mode = self.mode();
        let (loss, mut grads, layer_traces) = batch_gradients(&self.params, &batch, mode, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let grad_norm = if self.plan.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.plan.grad_clip)
        } else {
            0.0
        };
        let lr = self.plan.schedule().lr_at(self.step + 1)?;
        adamw_step(&mut self.params.tensors_mut(), &grads, &mut self.optimizer, lr)?;
        let this_step = self.step;
        self.step += 1;

        let traces = if self.plan.trace_interval > 0 && this_step % self.plan.trace_interval == 0 {
            trace_records(this_step, &batch, &layer_traces, self.target.segment_length, mode)
        } else {
            Vec::new()
        };
        Ok(StepResult {
            metric: MetricRecord {
                step: this_step,
                loss,
                lr,
                tokens: self.step * self.plan.batch_size as u64,
                mode: mode.as_str().to_string(),
            },
            traces,
            grad_norm,
        })
    }

    fn duplicate(&mut self) -> Result<()> {
        let moe = duplicate_dense(&self.params, &self.target, &mut router_rng(self.plan.seed))?;
        self.optimizer = carry_moments(&self.optimizer, &moe);
        self.params = moe;
        self.phase = Phase::Main;
        Ok(())
    }
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

type BatchGrads = (f64, Vec<Vec<f32>>, Vec<Vec<LayerTrace>>);

/// Mean loss, mean gradients (canonical order) and routing traces of a batch.
///
/// Merging modes build one graph per instance, possibly on parallel workers;
/// Expert Choice needs the whole batch in one graph.
fn batch_gradients(
    params: &ModelParams<f32>,
    batch: &[&TrainingInstance],
    mode: RoutingMode,
    exec: &Executor,
) -> Result<BatchGrads> {
    let opts = ForwardOptions::with_mode(mode);
    let lens: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let scale = 1.0 / batch.len() as f32;
    if mode.is_expert_choice() {
        let mut g = Graph::<f32>::new();
        let pv = ParamVars::bind(&mut g, params);
        let seqs: Vec<&[usize]> = batch.iter().map(|i| i.tokens.as_slice()).collect();
        let outs = forward_batch(&mut g, &pv, &params.config, &seqs, &opts)?;
        let mut losses = Vec::with_capacity(outs.len());
        for (o, s) in outs.iter().zip(&seqs) {
            losses.push(lm_loss(&mut g, o.logits, s)?);
        }
        let total = losses[1..].iter().try_fold(losses[0], |acc, &l| g.add(acc, l))?;
        let mean = g.scale(total, 1.0 / batch.len() as f64);
        let loss = g.value(mean).item() as f64;
        let grads = g.backward(mean)?;
        let grads = pv
            .in_order()
            .iter()
            .zip(&lens)
            .map(|(&v, &n)| grads.get_or_zeros(v, n))
            .collect();
        return Ok((loss, grads, outs.into_iter().map(|o| o.layers).collect()));
    }

    let per_instance = exec.try_map(batch, |_, inst| -> Result<(f64, Vec<Vec<f32>>, Vec<LayerTrace>)> {
        let mut g = Graph::<f32>::new();
        let pv = ParamVars::bind(&mut g, params);
        let out = forward(&mut g, &pv, &params.config, &inst.tokens, &opts)?;
        let loss = lm_loss(&mut g, out.logits, &inst.tokens)?;
        let value = g.value(loss).item() as f64;
        let grads = g.backward(loss)?;
        let grads = pv
            .in_order()
            .iter()
            .zip(&lens)
            .map(|(&v, &n)| grads.get_or_zeros(v, n))
            .collect();
        Ok((value, grads, out.layers))
    })?;
    // reduce in batch order so the sum is independent of the worker count
    let mut total: Vec<Vec<f32>> = lens.iter().map(|&n| vec![0.0; n]).collect();
    let mut loss = 0.0;
    let mut traces = Vec::with_capacity(batch.len());
    for (l, grads, tr) in per_instance {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
        traces.push(tr);
    }
    Ok((loss / batch.len() as f64, total, traces))
}

/// Domain covering most tokens of `span` (ties go to the earlier label).
pub fn majority_domain(inst: &TrainingInstance, span: std::ops::Range<usize>) -> Option<String> {
    let mut counts: Vec<(Option<&str>, usize)> = Vec::new();
    for p in &inst.provenance {
        let lo = p.start.max(span.start);
        let hi = (p.start + p.len).min(span.end);
        if lo < hi {
            match counts.iter_mut().find(|(d, _)| *d == p.domain.as_deref()) {
                Some(c) => c.1 += hi - lo,
                None => counts.push((p.domain.as_deref(), hi - lo)),
            }
        }
    }
    let mut best: Option<(Option<&str>, usize)> = None;
    for c in counts {
        if best.is_none_or(|b| c.1 > b.1) {
            best = Some(c);
        }
    }
    best.and_then(|(d, _)| d.map(str::to_string))
}

fn trace_records(
    step: u64,
    batch: &[&TrainingInstance],
    traces: &[Vec<LayerTrace>],
    segment_length: usize,
    mode: RoutingMode,
) -> Vec<TraceRecord> {
    if matches!(mode, RoutingMode::Dense | RoutingMode::EcToken) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (i, (inst, layers)) in batch.iter().zip(traces).enumerate() {
        let layout = split_segments(inst.tokens.len(), segment_length);
        for (l, t) in layers.iter().enumerate() {
            let shared = t.weights.len() == 1;
            for (k, span) in layout.spans().iter().enumerate() {
                let w = if shared { &t.weights[0] } else { &t.weights[k] };
                out.push(TraceRecord {
                    step,
                    instance: i,
                    layer: l,
                    segment: k,
                    weights: w.clone(),
                    domain: majority_domain(inst, span.clone()),
                });
            }
        }
    }
    out
}

/// Mean per-token loss over `instances`, without gradients.
pub fn mean_loss(params: &ModelParams<f32>, instances: &[TrainingInstance], exec: &Executor) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Data("no instances to evaluate".into()));
    }
    let opts = ForwardOptions::default();
    let losses = exec.try_map(instances, |_, inst| -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let pv = ParamVars::bind_frozen(&mut g, params);
        let out = forward(&mut g, &pv, &params.config, &inst.tokens, &opts)?;
        let loss = lm_loss(&mut g, out.logits, &inst.tokens)?;
        Ok(g.value(loss).item() as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(RunDir { root })
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.jsonl")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.jsonl")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:07}"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final")
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop (and checkpoint) after this step count even if the plan goes on.
    pub stop_after: Option<u64>,
    /// Instances for periodic held-out evaluation.
    pub eval: Option<InstanceSet>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub metrics: Vec<MetricRecord>,
    pub traces: Vec<TraceRecord>,
    pub evals: Vec<EvalRecord>,
    /// Checkpoint written when the run ended, if a run directory was given.
    pub last_checkpoint: Option<PathBuf>,
}

impl RunReport {
    /// Mean loss over the last 10% of logged steps.
    pub fn final_loss(&self) -> Option<f64> {
        tail_mean_loss(&self.metrics, 0.1)
    }
}

/// Runs `trainer` to the end of its plan (or `opts.stop_after`). With a run
/// directory, metrics and traces stream to JSONL files, checkpoints land at
/// the configured interval and a final checkpoint is always written. A
/// non-finite loss aborts the run; checkpoints already written are kept.
pub fn run(
    trainer: &mut Trainer,
    data: &InstanceSet,
    exec: &Executor,
    dir: Option<&RunDir>,
    opts: &RunOptions,
) -> Result<RunReport> {
    let mut writers = match dir {
        Some(d) => Some((
            JsonlWriter::create(&d.metrics())?,
            JsonlWriter::create(&d.trace())?,
            JsonlWriter::create(&d.eval())?,
        )),
        None => None,
    };
    let stop = opts
        .stop_after
        .unwrap_or(trainer.plan.total_steps)
        .min(trainer.plan.total_steps);
    let mut report = RunReport {
        metrics: Vec::new(),
        traces: Vec::new(),
        evals: Vec::new(),
        last_checkpoint: None,
    };
    let log_every = trainer.plan.log_interval.max(1);
    while trainer.step < stop {
        let r = trainer.step(data, exec)?;
        let step = r.metric.step;
        if step % log_every == 0 || trainer.step == stop {
            log::info!(
                "step {step} loss {:.4} lr {:.2e} mode {} |g| {:.3}",
                r.metric.loss,
                r.metric.lr,
                r.metric.mode,
                r.grad_norm
            );
        }
        if let Some((m, t, _)) = writers.as_mut() {
            m.write(&r.metric)?;
            for rec in &r.traces {
                t.write(rec)?;
            }
        }
        report.metrics.push(r.metric);
        report.traces.extend(r.traces);

        let done = trainer.step;
        if let (Some(eval), true) = (
            &opts.eval,
            trainer.plan.eval_interval > 0 && done % trainer.plan.eval_interval == 0,
        ) {
            let rec = EvalRecord {
                step: done,
                eval_loss: mean_loss(&trainer.params, &eval.instances, exec)?,
                instances: eval.len(),
            };
            if let Some((_, _, e)) = writers.as_mut() {
                e.write(&rec)?;
            }
            report.evals.push(rec);
        }
        if let Some(d) = dir {
            let interval = trainer.plan.checkpoint_interval;
            if interval > 0 && done % interval == 0 && done < stop {
                save_checkpoint(&d.checkpoint(done), &trainer.checkpoint()?)?;
            }
        }
    }
    if let (Some(d), Some((m, t, e))) = (dir, writers.as_mut()) {
        m.flush()?;
        t.flush()?;
        e.flush()?;
        let path = if trainer.is_done() {
            d.final_checkpoint()
        } else {
            d.checkpoint(trainer.step)
        };
        save_checkpoint(&path, &trainer.checkpoint()?)?;
        report.last_checkpoint = Some(path);
    }
    Ok(report)
}

/// Trains the dense counterpart for the plan's warmup share of steps, then
/// duplicates its FFN into every expert. Returns the dense parameters at the
/// moment of duplication together with the resulting target parameters.
pub fn warmup_dense_then_duplicate(
    target: &ModelConfig,
    plan: &TrainPlan,
    data: &InstanceSet,
    exec: &Executor,
) -> Result<(ModelParams<f32>, ModelParams<f32>)> {
    if target.routing_mode == RoutingMode::Dense {
        return Err(Error::config(
            "routing_mode",
            "a dense target has nothing to duplicate into",
        ));
    }
    let mut trainer = Trainer::new(target, plan)?;
    if trainer.phase == Phase::Main {
        let dense = ModelParams::init(&target.dense_counterpart(), &mut ChaCha8Rng::seed_from_u64(plan.seed))?;
        return Ok((dense, trainer.params));
    }
    while trainer.phase == Phase::DenseWarmup && trainer.step < plan.dense_steps() {
        trainer.update(data, exec)?;
    }
    let dense = trainer.params.clone();
    trainer.duplicate()?;
    Ok((dense, trainer.params))
}
