use std::io::Write;
use std::path::Path;

use moelab_core::analysis::{
    active_threshold, flops_csv, group_by_domain, heatmap, loss_gap_csv, loss_gap_curve, percent, perplexity,
    routing_traces, specialization_csv, specialization_report, tail_mean_gap, utilization_csv, utilization_report,
    FlopsModel, UtilizationRow,
};
use moelab_core::batching::{
    embed_documents, ingest_corpus, mean_adjacent_cosine, pack_instances, random_order, read_instances,
    similarity_order, two_domain_corpus, write_corpus, write_instances, BatchMode, ByteTokenizer, ChainStart, Embedder,
    TrainingInstance, SEP,
};
use moelab_core::model::{generate, GenerateOptions, ModelParams, RoutingMode};
use moelab_core::par::Executor;
use moelab_core::training::{
    load_checkpoint, read_jsonl, run as run_training, Checkpoint, MetricRecord, RunDir, RunOptions, TraceRecord,
    Trainer,
};
use moelab_core::{Error, Result};
use serde_json::json;

use super::{
    AnalyzeArgs, BatchArgs, Cli, Command, EmbedderKind, EvalArgs, GenerateArgs, GroupBy, Report, Routing, SynthArgs,
    TrainArgs,
};
use crate::config;

pub fn run(cli: Cli) -> Result<()> {
    let exec = Executor::new(cli.workers)?;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Batch(a) => batch(a, &exec),
        Command::Train(a) => train(a, &exec),
        Command::Eval(a) => eval(a, &exec),
        Command::Analyze(a) => analyze(a, &exec),
        Command::Generate(a) => generate_text(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let docs = two_domain_corpus(a.docs, a.seed);
    write_corpus(&a.out, &docs)?;
    println!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

fn batch(a: BatchArgs, exec: &Executor) -> Result<()> {
    let mode: BatchMode = a.mode.parse()?;
    let docs = ingest_corpus(&a.corpus)?;
    if docs.is_empty() {
        return Err(Error::Data(format!("corpus {} has no documents", a.corpus.display())));
    }
    let embedder = match a.embedder {
        EmbedderKind::Hashed => Embedder::Hashed { dim: a.dim },
        EmbedderKind::File => Embedder::File(
            a.embeddings
                .clone()
                .ok_or_else(|| Error::config("embeddings", "--embedder file needs --embeddings"))?,
        ),
    };
    let embedded = embed_documents(&docs, &embedder)?;
    let order = match mode {
        BatchMode::Sim => similarity_order(&embedded, a.k, ChainStart::default(), exec)?,
        BatchMode::Rand => random_order(docs.len(), a.seed),
    };
    let set = pack_instances(&docs, &order, &ByteTokenizer, a.seq_len, mode, a.seed)?;
    write_instances(&a.out, &set)?;
    let cosine = mean_adjacent_cosine(&embedded, &order);
    let effective = json!({
        "corpus": a.corpus,
        "out": a.out,
        "mode": mode.as_str(),
        "seq_len": a.seq_len,
        "embedder": match &embedder { Embedder::Hashed { dim } => json!({"hashed": dim}), Embedder::File(p) => json!({"file": p}) },
        "k": a.k,
        "seed": a.seed,
    });
    write_json(&a.out.with_extension("batch.json"), &effective)?;
    println!("documents {}", docs.len());
    println!("instances {}", set.len());
    println!("mean_adjacent_cosine {cosine:.6}");
    Ok(())
}

fn train(a: TrainArgs, exec: &Executor) -> Result<()> {
    let data = read_instances(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if a.config.is_some() || !a.overrides.is_empty() {
                let cfg = config::load(a.config.as_deref(), &a.overrides)?;
                ckpt.expect_target(&cfg.model)?;
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => {
            let mut overrides = a.overrides.clone();
            if let Some(seed) = a.seed {
                overrides.push(format!("plan.seed={seed}"));
            }
            let cfg = config::load(a.config.as_deref(), &overrides)?;
            Trainer::new(&cfg.model, &cfg.plan)?
        }
    };
    let dir = RunDir::new(&a.out)?;
    let effective = config::RunConfig {
        model: trainer.target.clone(),
        plan: trainer.plan.clone(),
    };
    write_json(&a.out.join("config.json"), &effective)?;
    let eval = a.eval_data.as_deref().map(read_instances).transpose()?;
    let opts = RunOptions {
        stop_after: a.stop_after,
        eval,
    };
    let report = run_training(&mut trainer, &data, exec, Some(&dir), &opts)?;
    if let Some(loss) = report.final_loss() {
        println!("final_loss {loss:.6}");
    }
    if let Some(path) = report.last_checkpoint {
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

fn load_params(path: &Path) -> Result<Checkpoint> {
    if !path.join("manifest.json").exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    load_checkpoint(path)
}

fn groups(instances: Vec<TrainingInstance>, by: GroupBy) -> Vec<(String, Vec<TrainingInstance>)> {
    match by {
        GroupBy::Domain if !instances.is_empty() => group_by_domain(&instances),
        _ => vec![("all".to_string(), instances)],
    }
}

fn eval(a: EvalArgs, exec: &Executor) -> Result<()> {
    let ckpt = load_params(&a.ckpt)?;
    let data = read_instances(&a.data)?;
    let rows = perplexity(&ckpt.params, &groups(data.instances, a.group_by), exec)?;
    println!("group\tinstances\ttokens\tloss\tppl");
    for r in rows {
        println!(
            "{}\t{}\t{}\t{:.6}\t{:.4}",
            r.group, r.instances, r.tokens, r.mean_loss, r.perplexity
        );
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn analyze(a: AnalyzeArgs, exec: &Executor) -> Result<()> {
    let ckpt = a.ckpt.as_deref().map(load_params).transpose()?;
    let target = ckpt.as_ref().map(|c| c.manifest.target.clone());
    match a.report {
        Report::Flops => {
            let model = match &target {
                Some(t) => FlopsModel {
                    context_length: t.context_length as u64,
                    segment_length: t.segment_length as u64,
                    model_dim: t.model_dim as u64,
                    ffn_dim: t.ffn_dim as u64,
                    num_experts: t.num_experts as u64,
                },
                None => FlopsModel {
                    context_length: a.context_length,
                    segment_length: a
                        .segment_length
                        .ok_or_else(|| Error::config("segment_length", "needed without --ckpt"))?,
                    model_dim: a.model_dim,
                    ffn_dim: a.ffn_dim,
                    num_experts: a
                        .experts
                        .ok_or_else(|| Error::config("experts", "needed without --ckpt"))?,
                },
            };
            model.validate()?;
            let ratio = model.overhead()?;
            flops_csv(output(a.out.as_deref())?, &model.table())?;
            println!("overhead {}/{} = {}", ratio.numer(), ratio.denom(), percent(ratio));
        }
        Report::Utilization => {
            let path = a
                .trace
                .as_deref()
                .ok_or_else(|| Error::config("trace", "utilization needs --trace"))?;
            let traces: Vec<TraceRecord> = read_jsonl(path)?;
            let experts = target
                .map(|t| t.num_experts)
                .or(a.experts.map(|e| e as usize))
                .or_else(|| traces.first().map(|t| t.weights.len()))
                .unwrap_or(1);
            let mut rows = utilization_report(&traces, a.window, active_threshold(experts));
            if rows.is_empty() {
                rows.push(UtilizationRow {
                    window: 0,
                    active_count: 0,
                });
            }
            utilization_csv(output(a.out.as_deref())?, &rows)?;
        }
        Report::Specialization => {
            let traces = match (&ckpt, &a.data, &a.trace) {
                (Some(c), Some(data), _) => {
                    let set = read_instances(data)?;
                    routing_traces(&c.params, &groups(set.instances, GroupBy::Domain), exec)?
                }
                (_, _, Some(trace)) => read_jsonl(trace)?,
                _ => {
                    return Err(Error::config(
                        "data",
                        "specialization needs --ckpt with --data, or --trace",
                    ))
                }
            };
            let layers = specialization_report(&traces, None)?;
            specialization_csv(output(a.out.as_deref())?, &layers)?;
            eprint!("{}", heatmap(&layers));
        }
        Report::Lossgap => {
            let dense_path = a
                .dense_metrics
                .as_deref()
                .ok_or_else(|| Error::config("dense_metrics", "lossgap needs --dense-metrics"))?;
            let moe_path = a
                .moe_metrics
                .as_deref()
                .ok_or_else(|| Error::config("moe_metrics", "lossgap needs --moe-metrics"))?;
            let dense: Vec<MetricRecord> = read_jsonl(dense_path)?;
            let moe: Vec<MetricRecord> = read_jsonl(moe_path)?;
            let curve = loss_gap_curve(&dense, &moe)?;
            loss_gap_csv(output(a.out.as_deref())?, &curve)?;
            if let Some(g) = tail_mean_gap(&curve, 0.1) {
                eprintln!("mean gap over the last 10% of steps: {g:.6}");
            }
        }
    }
    Ok(())
}

fn generate_text(a: GenerateArgs) -> Result<()> {
    let ckpt = load_params(&a.ckpt)?;
    let params: ModelParams<f32> = ckpt.params;
    let mode = match (params.config.routing_mode, a.routing) {
        (RoutingMode::Dense, _) => RoutingMode::Dense,
        (_, Routing::Prompt) => RoutingMode::PromptOnly,
        (_, Routing::Segment) => RoutingMode::CausalSegment,
    };
    let prompt = ByteTokenizer.encode(&a.prompt);
    let out = generate(
        &params,
        &prompt,
        &GenerateOptions {
            max_new_tokens: a.max_tokens,
            mode: Some(mode),
            stop_token: Some(SEP),
        },
    )?;
    println!("{}{}", a.prompt, ByteTokenizer.decode(&out.tokens));
    Ok(())
}
