//! `astgcrn`: synthetic data, training, evaluation, prediction, and the
//! oracle suites from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! checkpoint error, 3 numeric failure (divergence, failing oracle).

mod config;

use astgcrn_core::data::{ingest_csv, split_and_window, write_csv, Split, SynthConfig, WindowedDataset};
use astgcrn_core::model::{AttentionVariant, GraphMode, Model, CHECKPOINT_VERSION};
use astgcrn_core::train::{check_compatible, evaluate, fit, predict_windows, EpochRecord, FitHooks, StopReason};
use astgcrn_core::{oracle, Error, Result, Tensor};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use serde_json::{json, Value};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const MANIFEST_VERSION: u32 = 1;
const TEST_MODE_VAR: &str = "STGCRN_TEST_MODE";

#[derive(Parser)]
#[command(name = "astgcrn", version, about = "Spatial-temporal graph recurrent forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset (data.csv, adjacency.csv, manifest.json).
    Synth(SynthArgs),
    /// Train a model and write checkpoint, report, and manifest.
    Train(TrainArgs),
    /// Per-horizon metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Forecasts of a checkpoint for every window of one split.
    Predict(PredictArgs),
    /// Run brute-force equivalence suites.
    Oracle {
        /// One of agc, attention, chebyshev, gradients, or all.
        #[arg(default_value = "all")]
        suite: String,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    nodes: usize,
    #[arg(long, default_value_t = 2016)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    coupling: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 288.0)]
    period: f64,
    /// Output directory.
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<AttentionVariant>,
    #[arg(long)]
    graph: Option<GraphMode>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Metrics CSV path; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) | Error::NanGradient(_) | Error::Diverged { .. } | Error::Oracle(_) => 3,
        _ => 2,
    }
}

fn test_mode() -> bool {
    std::env::var(TEST_MODE_VAR).is_ok_and(|v| v == "1")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(Error::from)
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn synth(args: SynthArgs) -> Result<u8> {
    let cfg = SynthConfig {
        nodes: args.nodes,
        steps: args.steps,
        seed: args.seed,
        period: args.period,
        coupling: args.coupling,
        noise_std: args.noise_std,
    };
    let series = cfg.generate()?;
    create_dir(&args.out)?;
    write_csv(&args.out.join("data.csv"), &series.values)?;
    write_csv(&args.out.join("adjacency.csv"), &cfg.adjacency()?)?;
    let manifest = json!({
        "manifest_version": MANIFEST_VERSION,
        "command": "synth",
        "test_mode": test_mode(),
        "seeds": { "noise": cfg.seed },
        "synth": serde_json::to_value(&cfg)?,
    });
    write_file(&args.out.join("manifest.json"), &pretty(&manifest))?;
    print!("{}", pretty(&manifest));
    Ok(0)
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(p) = &args.data {
        c.data = Some(p.clone());
    }
    if let Some(p) = &args.adjacency {
        c.adjacency = Some(p.clone());
    }
    if let Some(s) = args.seed {
        c.set_seed(s);
    }
    if let Some(v) = args.variant {
        c.model.attention = v;
    }
    if let Some(g) = args.graph {
        c.model.graph = g;
    }
    if let Some(e) = args.max_epochs {
        c.schedule.max_epochs = e;
    }
    if let Some(o) = &args.out {
        c.out = o.clone();
    }
    Ok(c)
}

fn load_adjacency(path: &Path, nodes: usize) -> Result<Tensor> {
    let a = ingest_csv(path)?.values;
    if a.shape() != [nodes, nodes] {
        return Err(Error::Compatibility(format!(
            "adjacency {} is {:?}, dataset has {nodes} nodes",
            path.display(),
            a.shape()
        )));
    }
    Ok(a)
}

fn train(args: TrainArgs) -> Result<u8> {
    let mut c = run_config(&args)?;
    let data_path = c.data.clone().ok_or_else(|| Error::Config("no dataset: pass --data or set `data`".into()))?;
    let series = ingest_csv(&data_path)?;
    c.model.nodes = series.nodes();
    c.model.input_channels = 1;
    c.model.validate()?;
    let data = split_and_window(&series, c.model.input_steps, c.model.horizon)?;
    let adjacency = match (c.model.graph, &c.adjacency) {
        (GraphMode::Static, Some(p)) => Some(load_adjacency(p, data.nodes)?),
        (GraphMode::Static, None) => {
            return Err(Error::Config("graph = static needs --adjacency".into()));
        }
        (GraphMode::Adaptive, _) => None,
    };
    let mut model = Model::new(c.model.clone(), adjacency.as_ref())?;
    create_dir(&c.out)?;

    let manifest = json!({
        "manifest_version": MANIFEST_VERSION,
        "checkpoint_version": CHECKPOINT_VERSION,
        "command": "train",
        "test_mode": test_mode(),
        "seeds": {
            "init": c.model.seed,
            "shuffle": c.schedule.seed,
            "query_sampling": c.model.informer_selection().seed,
        },
        "parameters": model.store.total_count(),
        "config": c.to_json(),
        "dataset": serde_json::to_value(data.manifest())?,
    });
    write_file(&c.out.join("manifest.json"), &pretty(&manifest))?;
    print!("{}", pretty(&manifest));

    let mut progress = |r: &EpochRecord| {
        eprintln!("epoch {:>4}  train {:.5}  val MAE {:.5}", r.epoch, r.train_loss, r.val.mae);
    };
    let hooks = FitHooks {
        on_epoch: Some(&mut progress),
        ..Default::default()
    };
    let start = Instant::now();
    let report = fit(&mut model, &data, &c.schedule, hooks)?;
    let wall = start.elapsed().as_secs_f64();

    model.save_checkpoint(&c.out.join("model.ckpt"))?;
    write_file(&c.out.join("report.json"), &pretty(&serde_json::to_value(&report)?))?;
    write_file(&c.out.join("report.csv"), &report.to_csv())?;
    let timing = json!({ "wall_time_secs": wall, "epochs": report.epochs.len() });
    write_file(&c.out.join("timing.json"), &pretty(&timing))?;
    eprintln!(
        "stopped: {} after {} epochs; best epoch {} (val MAE {:.5})",
        report.stop_reason,
        report.epochs.len(),
        report.best_epoch,
        report.best_val_mae
    );
    if report.stop_reason == StopReason::Diverged {
        eprintln!("error: training diverged");
        return Ok(3);
    }
    let test = evaluate(&model, &data, Split::Test, c.schedule.batch_size)?;
    write_file(&c.out.join("test_metrics.csv"), &test.to_csv())?;
    Ok(0)
}

fn checkpoint_and_data(checkpoint: &Path, data: &Path) -> Result<(Model, WindowedDataset)> {
    let model = Model::load_checkpoint(checkpoint)?;
    let series = ingest_csv(data)?;
    let c = &model.config;
    let data = split_and_window(&series, c.input_steps, c.horizon)?;
    check_compatible(&model, &data)?;
    Ok((model, data))
}

fn eval(args: EvalArgs) -> Result<u8> {
    let (model, data) = checkpoint_and_data(&args.checkpoint, &args.data)?;
    let csv = evaluate(&model, &data, args.split, args.batch_size)?.to_csv();
    if let Some(out) = &args.out {
        write_file(out, &csv)?;
    }
    print!("{csv}");
    Ok(0)
}

fn predict(args: PredictArgs) -> Result<u8> {
    let (model, data) = checkpoint_and_data(&args.checkpoint, &args.data)?;
    let idx = data.indices(args.split);
    let pred = predict_windows(&model, &data, &idx, args.batch_size)?;
    let mut csv = String::from("window_start,horizon");
    for n in 0..data.nodes {
        write!(csv, ",node_{n}").unwrap();
    }
    csv.push('\n');
    for (i, &w) in idx.iter().enumerate() {
        for h in 0..data.horizon {
            write!(csv, "{},{}", data.starts[w], h + 1).unwrap();
            for n in 0..data.nodes {
                write!(csv, ",{}", pred.at(&[i, h, n, 0])).unwrap();
            }
            csv.push('\n');
        }
    }
    match &args.out {
        Some(out) => write_file(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn run_oracle(suite: &str) -> Result<u8> {
    let report = oracle::run_suite(suite)?;
    print!("{}", report.to_table());
    Ok(if report.passed() { 0 } else { 3 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if test_mode() {
        eprintln!("{TEST_MODE_VAR}=1: 64-bit deterministic execution");
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Oracle { suite } => run_oracle(&suite),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
