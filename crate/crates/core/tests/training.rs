mod support;

use moelab_core::batching::{random_batching, two_domain_corpus, ByteTokenizer, InstanceSet};
use moelab_core::model::{eval_logits, ForwardOptions, ModelConfig, RoutingMode};
use moelab_core::par::Executor;
use moelab_core::training::*;
use moelab_core::Error;

fn small(mode: RoutingMode) -> ModelConfig {
    ModelConfig {
        context_length: 32,
        segment_length: 8,
        num_experts: if mode == RoutingMode::Dense { 1 } else { 4 },
        num_layers: 2,
        model_dim: 16,
        ffn_dim: 32,
        num_heads: 2,
        vocab_size: 258,
        routing_mode: mode,
        capacity_factor: 1.0,
    }
}

fn plan(steps: u64) -> TrainPlan {
    TrainPlan {
        total_steps: steps,
        batch_size: 4 * 32,
        base_lr: 3e-3,
        seed: 11,
        ..Default::default()
    }
}

fn data(docs: usize) -> InstanceSet {
    random_batching(&two_domain_corpus(docs, 5), &ByteTokenizer, 32, 5).unwrap()
}

#[test]
fn fresh_model_starts_near_uniform() {
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &plan(10)).unwrap();
    let r = t.step(&data(40), &Executor::sequential()).unwrap();
    assert!((r.metric.loss - 258f64.ln()).abs() < 0.1, "{}", r.metric.loss);
    assert_eq!(r.metric.step, 0);
    assert_eq!(r.metric.tokens, 128);
}

#[test]
fn same_seed_gives_identical_logs() {
    let d = data(40);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    for dir in &dirs {
        let run_dir = RunDir::new(dir.path()).unwrap();
        let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &plan(12)).unwrap();
        run(
            &mut t,
            &d,
            &Executor::sequential(),
            Some(&run_dir),
            &RunOptions::default(),
        )
        .unwrap();
        logs.push((
            std::fs::read(run_dir.metrics()).unwrap(),
            std::fs::read(run_dir.trace()).unwrap(),
        ));
        assert!(run_dir.final_checkpoint().join("manifest.json").exists());
    }
    assert_eq!(logs[0], logs[1]);
    assert!(!logs[0].1.is_empty());
}

#[test]
fn worker_count_does_not_change_the_trajectory() {
    let d = data(40);
    let mut a = Trainer::new(&small(RoutingMode::CausalSegment), &plan(6)).unwrap();
    let mut b = a.clone();
    let ra = run(&mut a, &d, &Executor::sequential(), None, &RunOptions::default()).unwrap();
    let rb = run(&mut b, &d, &Executor::new(3).unwrap(), None, &RunOptions::default()).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    assert_eq!(a.params, b.params);
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let d = data(40);
    let mut p = plan(14);
    p.dense_warmup_fraction = 0.3;
    p.checkpoint_interval = 3;
    let cfg = small(RoutingMode::CausalSegment);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(&cfg, &p).unwrap();
    let full_report = run(
        &mut full,
        &d,
        &Executor::sequential(),
        Some(&RunDir::new(full_dir.path()).unwrap()),
        &RunOptions::default(),
    )
    .unwrap();

    // stop inside the dense warmup, then again after duplication
    for stop in [2, 9] {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = RunDir::new(dir.path()).unwrap();
        let mut first = Trainer::new(&cfg, &p).unwrap();
        let opts = RunOptions {
            stop_after: Some(stop),
            ..Default::default()
        };
        let head = run(&mut first, &d, &Executor::sequential(), Some(&run_dir), &opts).unwrap();
        let ckpt_path = head.last_checkpoint.unwrap();
        assert_eq!(ckpt_path, run_dir.checkpoint(stop));
        let ckpt = load_checkpoint(&ckpt_path).unwrap();
        assert_eq!(ckpt.manifest.step, stop);
        let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
        let tail = run(&mut resumed, &d, &Executor::sequential(), None, &RunOptions::default()).unwrap();
        let joined: Vec<_> = head.metrics.iter().chain(&tail.metrics).cloned().collect();
        assert_eq!(joined, full_report.metrics, "stop at {stop}");
        assert_eq!(resumed.params, full.params);
    }
    assert!(RunDir::new(full_dir.path())
        .unwrap()
        .checkpoint(3)
        .join("params.bin")
        .exists());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &plan(5)).unwrap();
    for _ in 0..2 {
        t.step(&data(40), &Executor::sequential()).unwrap();
    }
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(a.path(), &t.checkpoint().unwrap()).unwrap();
    let loaded = load_checkpoint(a.path()).unwrap();
    assert_eq!(loaded.params, t.params);
    save_checkpoint(b.path(), &loaded).unwrap();
    for f in ["manifest.json", "params.bin", "optimizer.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn mismatched_config_is_named() {
    let t = Trainer::new(&small(RoutingMode::CausalSegment), &plan(5)).unwrap();
    let ckpt = t.checkpoint().unwrap();
    let mut other = small(RoutingMode::CausalSegment);
    other.segment_length = 4;
    match ckpt.expect_target(&other).unwrap_err() {
        Error::Config { field, .. } => assert_eq!(field, "segment_length"),
        e => panic!("{e}"),
    }
    assert!(ckpt.expect_target(&small(RoutingMode::CausalSegment)).is_ok());

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &ckpt).unwrap();
    let bin = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn plan_validation_names_fields() {
    let cfg = small(RoutingMode::CausalSegment);
    let mut p = plan(5);
    p.batch_size = 33;
    match Trainer::new(&cfg, &p).unwrap_err() {
        Error::Config { field, .. } => assert_eq!(field, "batch_size"),
        e => panic!("{e}"),
    }
    let mut p = plan(5);
    p.warmup_fraction = 1.5;
    assert!(Trainer::new(&cfg, &p)
        .unwrap_err()
        .to_string()
        .contains("warmup_fraction"));
}

fn assert_duplicate_matches_dense(mode: RoutingMode, dense_fraction: f64) {
    let d = data(40);
    let mut p = plan(20);
    p.dense_warmup_fraction = dense_fraction;
    let (dense, moe) = warmup_dense_then_duplicate(&small(mode), &p, &d, &Executor::sequential()).unwrap();
    assert_eq!(moe.config.routing_mode, mode);
    let dense = dense.cast::<f64>();
    let moe = moe.cast::<f64>();
    for inst in d.instances.iter().take(5) {
        let (a, _) = eval_logits(&dense, &inst.tokens, &ForwardOptions::default()).unwrap();
        let (b, _) = eval_logits(&moe, &inst.tokens, &ForwardOptions::default()).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{mode:?} {dense_fraction}: {diff}");
    }
}

#[test]
fn duplication_preserves_the_dense_function() {
    for mode in [RoutingMode::CausalSegment, RoutingMode::Prefix, RoutingMode::PromptOnly] {
        assert_duplicate_matches_dense(mode, 0.2);
    }
    assert_duplicate_matches_dense(RoutingMode::CausalSegment, 0.0);
}

#[test]
fn duplication_resets_only_expert_moments() {
    let mut p = plan(10);
    p.dense_warmup_fraction = 0.2;
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &p).unwrap();
    let d = data(40);
    t.step(&d, &Executor::sequential()).unwrap();
    assert_eq!(t.phase, Phase::DenseWarmup);
    t.step(&d, &Executor::sequential()).unwrap();
    assert_eq!(t.phase, Phase::Main);
    for s in &t.optimizer.slots {
        let expert = s.name.contains(".experts.") || s.name.ends_with(".router");
        assert_eq!(s.t == 0, expert, "{}", s.name);
    }
}

#[test]
fn experts_diverge_after_duplication() {
    let d = data(120);
    let mut p = plan(55);
    p.dense_warmup_fraction = 0.1;
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &p).unwrap();
    run(&mut t, &d, &Executor::sequential(), None, &RunOptions::default()).unwrap();
    let spread = t
        .params
        .layers
        .iter()
        .map(|l| {
            let e = &l.bank.experts;
            (1..e.len()).map(|j| e[0].max_abs_diff(&e[j])).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    assert!(spread > 0.0);
}

#[test]
fn training_reduces_the_loss() {
    let d = data(200);
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &plan(150)).unwrap();
    let r = run(&mut t, &d, &Executor::sequential(), None, &RunOptions::default()).unwrap();
    let first = r.metrics[0].loss;
    let last = r.final_loss().unwrap();
    assert!(last < first - 1.0, "{first} -> {last}");
}

#[test]
fn diverging_run_keeps_earlier_checkpoints() {
    let d = data(40);
    let mut p = plan(20);
    p.base_lr = 1e12;
    p.warmup_fraction = 0.0;
    p.grad_clip = 0.0;
    p.checkpoint_interval = 1;
    let dir = tempfile::tempdir().unwrap();
    let run_dir = RunDir::new(dir.path()).unwrap();
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &p).unwrap();
    let err = run(
        &mut t,
        &d,
        &Executor::sequential(),
        Some(&run_dir),
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(run_dir.checkpoint(1).join("manifest.json").exists());
}

#[test]
fn expert_choice_trains() {
    for mode in [RoutingMode::EcSegment, RoutingMode::EcToken] {
        let mut t = Trainer::new(&small(mode), &plan(4)).unwrap();
        let r = run(&mut t, &data(40), &Executor::sequential(), None, &RunOptions::default()).unwrap();
        assert!(r.metrics.iter().all(|m| m.loss.is_finite()));
        assert_eq!(r.metrics.last().unwrap().mode, mode.as_str());
    }
}

#[test]
fn eval_loss_is_logged() {
    let d = data(40);
    let mut p = plan(4);
    p.eval_interval = 2;
    let mut t = Trainer::new(&small(RoutingMode::CausalSegment), &p).unwrap();
    let opts = RunOptions {
        eval: Some(d.clone()),
        ..Default::default()
    };
    let r = run(&mut t, &d, &Executor::sequential(), None, &opts).unwrap();
    assert_eq!(r.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4]);
    assert!(r.evals[1].eval_loss < 258f64.ln() + 0.1);
}
