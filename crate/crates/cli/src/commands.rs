use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lorag_core::generator::AnyGenerator;
use lorag_core::metrics::rouge;
use lorag_core::refine_loop::LoopError;
use lorag_core::rl::{train_toy as train, window_means, TaskFixture, TrainParams};
use lorag_core::{
    derive_seed, ingest as read_corpus, run_loop, tokenize, Backend, EvalPair, Index, MetricsReport, PolicyParams,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

const CURVE_WINDOW: usize = 20;

/// An output document with the effective configuration alongside.
#[derive(Serialize)]
struct Artifact<'a, C: Serialize, T: Serialize> {
    config: &'a C,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(corpus: &Path, index_dir: &Path) -> Result<()> {
    let corpus = read_corpus(corpus)?;
    let index = Index::build(corpus)?;
    index.save(index_dir)?;
    println!("documents: {}", index.doc_count());
    println!("terms: {}", index.term_count());
    Ok(())
}

fn generator(cfg: &RunConfig) -> Result<AnyGenerator> {
    let policy = match (&cfg.generator.backend, &cfg.generator.policy_path) {
        (Backend::ToyPolicy, Some(p)) => {
            Some(PolicyParams::load(p).with_context(|| format!("loading policy {}", p.display()))?)
        }
        (Backend::ToyPolicy, None) => bail!("toy-policy backend needs generator.policy_path in the config file"),
        _ => None,
    };
    Ok(AnyGenerator::from_config(&cfg.generator, policy)?)
}

pub fn run(query: &str, cfg: &RunConfig) -> Result<()> {
    let index = Index::load(cfg.index_dir()?)?;
    let generator = generator(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let stem = format!("transcript-{}", cfg.content_hash(query));

    match run_loop(query, &index, &generator, &cfg.loop_cfg, cfg.seed) {
        Ok(transcript) => {
            let path = cfg.output_dir.join(format!("{stem}.json"));
            write_json(&path, &Artifact { config: cfg, body: &transcript })?;
            let reason = serde_json::to_value(transcript.stop_reason)?;
            println!("final: {}", transcript.final_output.text());
            println!("stop_reason: {}", reason.as_str().unwrap_or_default());
            println!("transcript: {}", path.display());
            Ok(())
        }
        Err(LoopError::Generation { iteration, source, partial }) => {
            let path = cfg.output_dir.join(format!("{stem}.json.partial"));
            write_json(&path, &Artifact { config: cfg, body: &*partial })?;
            Err(anyhow::Error::new(source).context(format!(
                "generation failed at iteration {iteration}; partial transcript in {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Deserialize)]
struct DatasetLine {
    query: String,
    reference: String,
}

#[derive(Serialize)]
struct LineOutcome {
    line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(rename = "final", skip_serializing_if = "Option::is_none")]
    final_text: Option<String>,
    #[serde(rename = "rougeL_f", skip_serializing_if = "Option::is_none")]
    rouge_l_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize)]
struct EvalReport {
    metrics: MetricsReport,
    lines: usize,
    failed: usize,
    per_line: Vec<LineOutcome>,
}

/// Scored pair, query and final text for one dataset line.
type LineResult = Result<(EvalPair, String, String)>;

fn eval_line(index: &Index, generator: &AnyGenerator, cfg: &RunConfig, n: usize, raw: &str) -> LineResult {
    let item: DatasetLine = serde_json::from_str(raw).context("malformed dataset line")?;
    let seed = derive_seed(cfg.seed, n as u64);
    let transcript = run_loop(&item.query, index, generator, &cfg.loop_cfg, seed)?;
    let text = transcript.final_output.text().to_owned();
    let hypothesis = tokenize(&text);
    let mut pair = EvalPair::new(hypothesis, tokenize(&item.reference));
    // Log-probabilities only count when they line up with the scored tokens.
    if let Some(lps) = transcript.final_output.logprobs() {
        if lps.len() == pair.hypothesis.len() {
            pair = pair.with_logprobs(lps);
        }
    }
    Ok((pair, item.query, text))
}

pub fn eval(dataset: &Path, cfg: &RunConfig) -> Result<()> {
    let text = fs::read_to_string(dataset).with_context(|| format!("reading dataset {}", dataset.display()))?;
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)).collect();
    if lines.is_empty() {
        bail!("dataset {} has no lines", dataset.display());
    }
    let index = Index::load(cfg.index_dir()?)?;
    let generator = generator(cfg)?;

    let results: Vec<(usize, LineResult)> =
        lines.par_iter().map(|&(n, raw)| (n, eval_line(&index, &generator, cfg, n, raw))).collect();

    let mut pairs = Vec::new();
    let mut per_line = Vec::with_capacity(results.len());
    for (line, result) in results {
        match result {
            Ok((pair, query, final_text)) => {
                let (_, _, l) = rouge(std::slice::from_ref(&pair))?;
                per_line.push(LineOutcome {
                    line,
                    query: Some(query),
                    final_text: Some(final_text),
                    rouge_l_f: Some(l),
                    error: None,
                });
                pairs.push(pair);
            }
            Err(e) => {
                eprintln!("line {line}: {e:#}");
                per_line.push(LineOutcome {
                    line,
                    query: None,
                    final_text: None,
                    rouge_l_f: None,
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }
    if pairs.is_empty() {
        bail!("all {} dataset lines failed", per_line.len());
    }

    let report = EvalReport {
        metrics: MetricsReport::compute(&pairs)?,
        lines: per_line.len(),
        failed: per_line.len() - pairs.len(),
        per_line,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("report-{}.json", cfg.content_hash(&text)));
    write_json(&path, &Artifact { config: cfg, body: &report })?;

    let m = &report.metrics;
    let ppl = m.perplexity.map_or("none".to_owned(), |p| format!("{p:.4}"));
    println!("bleu={:.4} rougeL={:.4} ppl={ppl}", m.bleu, m.rouge_l_f);
    println!("report: {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct TrainConfig<'a> {
    task: &'a Path,
    steps: usize,
    lr: f64,
    episodes: usize,
    seed: u64,
    max_tokens: usize,
}

pub fn train_toy(args: &TrainArgs) -> Result<()> {
    let task = TaskFixture::load(&args.task)?;
    let policy = task.initial_policy(&args.task)?;
    let params = TrainParams {
        steps: args.steps.or(task.steps).unwrap_or(200),
        lr: args.lr.or(task.lr).unwrap_or(0.5),
        episodes_per_step: args.episodes.or(task.episodes).unwrap_or(64),
        seed: args.seed.or(task.seed).unwrap_or(0),
    };
    let outcome = train(&policy, &task.setup(), params)?;

    fs::create_dir_all(&args.out)?;
    let config = TrainConfig {
        task: &args.task,
        steps: params.steps,
        lr: params.lr,
        episodes: params.episodes_per_step,
        seed: params.seed,
        max_tokens: task.max_tokens,
    };
    write_json(&args.out.join("policy.json"), &Artifact { config: &config, body: &outcome.policy.to_json() })?;
    let mut csv = String::from("step,mean_reward\n");
    for (step, r) in outcome.reward_curve.iter().enumerate() {
        csv.push_str(&format!("{step},{r}\n"));
    }
    let curve_path = args.out.join("reward_curve.csv");
    fs::write(&curve_path, csv).with_context(|| format!("writing {}", curve_path.display()))?;

    let windows = window_means(&outcome.reward_curve, CURVE_WINDOW);
    println!("first window mean: {:.4}", windows[0]);
    println!("last window mean: {:.4}", windows[windows.len() - 1]);
    Ok(())
}
