use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;

use fsan::alignment::export_map;
use fsan::config::ModelConfig;
use fsan::data_io::{generate_synthetic, load_features, Dataset, SyntheticConfig};
use fsan::encoders::{tokenize, UNK_ID};
use fsan::eval_metrics::{write_per_sample_csv, DiscardRule};
use fsan::grounding::BenchRow;
use fsan::harness::{
    bench, ensure_parent, evaluate_split, parse_sizes, train_on_split, Protocol, SplitName, TrainOptions,
    DEFAULT_BENCH_SIZES,
};
use fsan::model::FsanModel;
use fsan::FsanError;

#[derive(Parser)]
#[command(name = "fsan", version, about = "Weakly supervised temporal grounding with semantic alignment maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-moment synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the metric report as JSON.
    Eval(EvalArgs),
    /// Ground one sentence in one feature file.
    Ground(GroundArgs),
    /// Compare the brute-force and prefix-sum scorers.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with synthetic generator fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_videos: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with model config fields and an optional "preset".
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; metadata goes to `<out>.meta.json`.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: SplitName,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_cross_modal: bool,
    #[arg(long)]
    no_inner_modal: bool,
    #[arg(long)]
    no_sap_losses: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "activitynet")]
    protocol: Protocol,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// DiDeMo label discard rule: `rank` or `iou`.
    #[arg(long, default_value = "rank")]
    discard: DiscardArg,
    /// Writes per-sample IoUs as CSV.
    #[arg(long)]
    per_sample: Option<PathBuf>,
}

#[derive(Clone, Copy)]
struct DiscardArg(DiscardRule);

impl std::str::FromStr for DiscardArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rank" => Ok(DiscardArg(DiscardRule::Rank)),
            "iou" => Ok(DiscardArg(DiscardRule::Iou)),
            other => Err(format!("unknown discard rule {other:?}")),
        }
    }
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// FSAV feature file of one video.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sentence: String,
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    /// Video duration in seconds; defaults to one second per frame row.
    #[arg(long)]
    duration: Option<f64>,
    /// Writes the alignment map as CSV.
    #[arg(long)]
    export_map: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated `NsxNv` sizes.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.chain().any(|c| c.downcast_ref::<FsanError>().is_some_and(FsanError::is_numerical));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ground(a) => ground(a),
        Command::Bench(a) => run_bench(a),
    }
}

/// Config file, then `FSAN_SEED`, then `--seed`.
fn resolve_seed(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(fsan::config::SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{}={v:?} is not an integer", fsan::config::SEED_ENV)),
        Err(_) => Ok(config_seed),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SyntheticConfig::load(p)?,
        None => SyntheticConfig::default(),
    };
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    if let Some(n) = a.n_videos {
        cfg.n_videos = n;
    }
    let (data, _) = generate_synthetic(&cfg)?;
    data.write(&a.out)?;
    println!(
        "wrote {} videos ({} clips x {} dims, seed {}) to {}",
        data.records.len(),
        cfg.n_clips,
        cfg.feature_dim,
        cfg.seed,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::desk(),
    };
    cfg.seed = resolve_seed(cfg.seed, a.seed)?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.no_cross_modal |= a.no_cross_modal;
    cfg.no_inner_modal |= a.no_inner_modal;
    cfg.no_sap_losses |= a.no_sap_losses;
    cfg.validate()?;

    let data = Dataset::load(&a.data)?;
    let corpus: Vec<Vec<String>> = data.records.iter().map(|r| r.tokens.clone()).collect();
    let d_raw = match data.features.values().next() {
        Some(f) => f.cols(),
        None => bail!("dataset {} has no feature files", a.data.display()),
    };
    let mut model = FsanModel::from_corpus(cfg, &corpus, d_raw)?;
    let loss_log = a.loss_log.unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    ensure_parent(&a.out)?;
    let opts = TrainOptions {
        loss_log: Some(loss_log.clone()),
        checkpoint: Some(a.out.clone()),
    };
    let summary = train_on_split(&mut model, &data, a.split, &opts)?;
    let last = summary.steps.last().map_or(f64::NAN, |s| s.total);
    println!(
        "trained {} steps, final loss {last:.6}, skipped triplets {}; checkpoint {}, loss log {}",
        summary.steps.len(),
        summary.skipped_triplets,
        a.out.display(),
        loss_log.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = FsanModel::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let report = evaluate_split(&model, &data, a.split, a.protocol, a.discard.0)?;
    if let Some(p) = &a.per_sample {
        write_per_sample_csv(p, report.per_sample())?;
    }
    println!("{}", serde_json::to_string(&report.to_json())?);
    Ok(())
}

fn ground(a: GroundArgs) -> Result<()> {
    let tokens = tokenize(&a.sentence);
    if tokens.is_empty() {
        bail!(FsanError::Input("sentence is empty after tokenization".into()));
    }
    let model = FsanModel::load(&a.checkpoint)?;
    let frames = load_features(&a.features)?;
    let duration = a.duration.unwrap_or(frames.rows() as f64);
    let ids = model.token_ids(&tokens);
    if ids.iter().all(|&i| i == UNK_ID) {
        warn!("every token of {:?} is out of vocabulary", a.sentence);
    }
    let clips = model.clips(&frames, duration)?;
    let (result, map) = model.ground(&ids, &clips, a.k)?;
    if let Some(p) = &a.export_map {
        export_map(p, &map, &tokens[..ids.len()])?;
    }
    let mut out = std::io::stdout().lock();
    for (s, e, score) in result.timestamps() {
        writeln!(out, "{s:.3}\t{e:.3}\t{score:.6}")?;
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let sizes = match &a.sizes {
        Some(s) => parse_sizes(s)?,
        None => DEFAULT_BENCH_SIZES.to_vec(),
    };
    let rows = bench(&sizes, a.seed)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", BenchRow::CSV_HEADER)?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
