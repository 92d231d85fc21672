//! `loopvla`: dataset generation, two-stage training, closed-loop evaluation,
//! throughput benchmarks and loop-index analysis.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` file, `--set key=value` overrides, then dedicated flags such as
//! `--seed`. `LOOPVLA_SEED` stands in for `--seed` when the flag is absent.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use loopvla::analysis::{
    depth_sweep, distribution_from_episodes, evaluate, histogram_csv, loop_index_distribution, mann_whitney_u, validate_report,
    EvalSpec, LoopIndexDistribution,
};
use loopvla::encoders::LoopConfig;
use loopvla::inference::{benchmark_throughput, InferMode};
use loopvla::model::checkpoint::Checkpoint;
use loopvla::model::{LoopVla, PolicyInput};
use loopvla::taskgen::{generate_episode, generate_split, load_dataset, serialize_dataset, Difficulty, Episode, EVAL_SEED_START};
use loopvla::training::{train_stage1, train_stage2, TrainConfig, TrainingSet};
use loopvla::Error;

mod config;

#[derive(Parser, Debug)]
#[command(name = "loopvla", version, about = "Looped transformer policy with learned halting")]
struct Cli {
    /// Seed for every random choice in the pipeline.
    #[arg(long, global = true, env = "LOOPVLA_SEED")]
    seed: Option<u64>,

    /// Upper bound on worker threads. Computation is single-threaded, so
    /// values above one are accepted and recorded but add no workers.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstrations for seeds `seed..seed+count`.
    Gen {
        #[arg(value_parser = parse_difficulty)]
        difficulty: Difficulty,
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Closed-loop evaluation on held-out seeds.
    Eval(EvalArgs),
    /// Actions-per-second benchmark.
    Bench(BenchArgs),
    /// Loop-index distributions and the fixed-depth sweep.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat TOML file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Checkpoint to resume or, for stage 2, to calibrate.
    #[arg(long, required_if_eq("stage", "2"))]
    checkpoint: Option<PathBuf>,
    /// Dataset files; repeat for several.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated suites.
    #[arg(long, value_delimiter = ',', default_value = "easy,medium,hard", value_parser = parse_difficulty)]
    suite: Vec<Difficulty>,
    /// optimal, adaptive[:theta] or fixed:<n>.
    #[arg(long, default_value = "optimal", value_parser = parse_mode)]
    mode: InferMode,
    /// Threshold for adaptive mode; overrides a value given in `--mode`.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long, default_value_t = 100)]
    episodes: u64,
    /// Actions executed per decision, 0 for the whole chunk.
    #[arg(long, default_value_t = 0)]
    execute: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "optimal", value_parser = parse_mode)]
    mode: InferMode,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    duration_ms: u64,
    #[arg(long, default_value_t = 7)]
    trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "easy,hard", value_parser = parse_difficulty)]
    suites: Vec<Difficulty>,
    /// Directory holding `<suite>.bin` held-out datasets; seeds are
    /// generated when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    episodes: u64,
    /// Also run the closed-loop fixed-depth sweep.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_difficulty(s: &str) -> Result<Difficulty, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<InferMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

type CliResult<T> = Result<T, Error>;

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => write_file(p, format!("{text}\n").as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path)
}

fn cmd_gen(difficulty: Difficulty, count: u64, seed: u64, out: &Path) -> CliResult<()> {
    if count == 0 {
        warn!("count is 0, writing an empty dataset");
    }
    let seeds = seed..seed + count;
    if seeds.end > EVAL_SEED_START && seeds.start < EVAL_SEED_START {
        warn!("seed range {seeds:?} spans the training and held-out splits");
    }
    let episodes = generate_split(difficulty, seeds);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    serialize_dataset(&episodes, out)?;
    info!("wrote {} {difficulty} episodes to {}", episodes.len(), out.display());
    Ok(())
}

/// Routes each `key = value` pair to the model or the training settings.
fn merge_settings(model: &LoopConfig, train: &TrainConfig, pairs: &[(String, serde_json::Value)]) -> CliResult<(LoopConfig, TrainConfig)> {
    let model_keys = serde_json::to_value(model)?;
    let (mut for_model, mut for_train) = (Vec::new(), Vec::new());
    for (k, v) in pairs {
        if model_keys.get(k).is_some() {
            for_model.push((k.clone(), v.clone()));
        } else {
            for_train.push((k.clone(), v.clone()));
        }
    }
    Ok((config::apply(model, &for_model)?, config::apply(train, &for_train)?))
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        pairs.extend(config::parse_file(&text, &path.display().to_string())?);
    }
    for item in &args.set {
        let (k, v) = config::parse_override(item)?;
        pairs.retain(|(existing, _)| *existing != k);
        pairs.push((k, v));
    }
    let (model_cfg, mut train_cfg) = merge_settings(&LoopConfig::default(), &TrainConfig::default(), &pairs)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let mut episodes: Vec<Episode> = Vec::new();
    for path in &args.data {
        episodes.extend(load_dataset(path)?);
    }
    let checkpoint = match &args.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let model_keys = serde_json::to_value(&model_cfg)?;
            if pairs.iter().any(|(k, _)| model_keys.get(k).is_some()) && ck.model.config != model_cfg {
                warn!("model settings are taken from the checkpoint; config model keys are ignored");
            }
            ck
        }
        None => Checkpoint::fresh(LoopVla::new(model_cfg, train_cfg.seed)?),
    };
    let data = TrainingSet::from_episodes(&episodes, checkpoint.model.config.chunk_size);
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", args.out.display())));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let file = File::create(&log_path).map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    let mut log = BufWriter::new(file);
    info!(
        "stage {} on {} samples, {} parameters",
        args.stage,
        data.len(),
        checkpoint.model.param_count()
    );
    let outcome = match args.stage {
        1 => train_stage1(checkpoint, &data, &train_cfg, None, Some(&mut log))?,
        _ => train_stage2(checkpoint, &data, &train_cfg, Some(&mut log))?,
    };
    log.flush().map_err(|e| Error::io("flushing training log", e))?;
    write_file(&args.out, &outcome.checkpoint.encode()?)?;
    info!(
        "wrote stage-{} checkpoint at step {} to {}",
        outcome.checkpoint.stage,
        outcome.checkpoint.step,
        args.out.display()
    );
    Ok(())
}

fn eval_spec(episodes: u64, execute: usize) -> EvalSpec {
    EvalSpec {
        seeds: EVAL_SEED_START..EVAL_SEED_START + episodes,
        execute,
        ..EvalSpec::default()
    }
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mode = match (args.mode, args.theta) {
        (InferMode::Adaptive { .. }, Some(theta)) => InferMode::Adaptive { theta },
        (_, Some(_)) => return Err(Error::Config("--theta applies only to adaptive mode".into())),
        (m, None) => m,
    };
    let report = evaluate(&ck.model, &args.suite, mode, &eval_spec(args.episodes, args.execute))?;
    validate_report(&serde_json::to_value(&report)?)?;
    if let Some(path) = &args.csv {
        write_file(path, report.to_csv()?.as_bytes())?;
    }
    emit_json(&report, args.out.as_deref())
}

#[derive(Serialize)]
struct BenchOutput {
    #[serde(flatten)]
    report: loopvla::inference::BenchReport,
    threads_requested: u32,
}

fn cmd_bench(args: &BenchArgs, seed: u64, threads: u32) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    if args.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let suites = Difficulty::ALL;
    let inputs: Vec<PolicyInput> = (0..8u64)
        .map(|i| {
            let eps: Vec<Episode> = (0..args.batch as u64)
                .map(|b| generate_episode(suites[(b % 3) as usize], EVAL_SEED_START + (seed + i * 64 + b) % 100))
                .collect();
            PolicyInput::from_states(eps.iter().map(|e| (&e.observations[0], e.instruction_id)))
        })
        .collect();
    let report = benchmark_throughput(&ck.model, args.mode, &inputs, Duration::from_millis(args.duration_ms), args.trials)?;
    emit_json(
        &BenchOutput {
            report,
            threads_requested: threads,
        },
        args.out.as_deref(),
    )
}

#[derive(Serialize)]
struct AnalysisOutput {
    distributions: Vec<LoopIndexDistribution>,
    /// One-sided rank-sum p-value that the last suite selects later
    /// iterations than the first.
    rank_sum_p_greater: Option<f64>,
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let distributions = match &args.data_dir {
        Some(dir) => {
            let mut out = Vec::new();
            for &d in &args.suites {
                let path = dir.join(format!("{}.bin", d.name()));
                if !path.exists() {
                    return Err(Error::Config(format!("missing {d} dataset: {}", path.display())));
                }
                out.push(distribution_from_episodes(model, d, &load_dataset(&path)?)?);
            }
            out
        }
        None => loop_index_distribution(model, &args.suites, EVAL_SEED_START..EVAL_SEED_START + args.episodes)?,
    };
    let rank_sum_p_greater = match (distributions.first(), distributions.last()) {
        (Some(a), Some(b)) if distributions.len() > 1 => {
            let x: Vec<f64> = b.n_star.iter().map(|&n| n as f64).collect();
            let y: Vec<f64> = a.n_star.iter().map(|&n| n as f64).collect();
            Some(mann_whitney_u(&x, &y).p_greater)
        }
        _ => None,
    };
    write_file(&args.out_dir.join("histogram.csv"), histogram_csv(&distributions)?.as_bytes())?;
    let output = AnalysisOutput {
        distributions,
        rank_sum_p_greater,
    };
    emit_json(&output, Some(&args.out_dir.join("distribution.json")))?;
    if args.sweep {
        let rows = depth_sweep(model, &args.suites, &eval_spec(args.episodes.min(100), 0))?;
        emit_json(&rows, Some(&args.out_dir.join("sweep.json")))?;
    }
    info!("wrote analysis to {}", args.out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Gen { difficulty, count, out } => cmd_gen(*difficulty, *count, seed.unwrap_or(0), out),
        Command::Train(args) => cmd_train(args, seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args, seed.unwrap_or(0), cli.threads),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
