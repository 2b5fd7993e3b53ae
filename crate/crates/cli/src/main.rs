mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use nextsession::data::{
    filter_dataset, ingest, make_split, read_dataset, write_dataset, DatasetMeta, DatasetSplit, FilterConfig, Protocol,
};
use nextsession::eval::{alpha_sweep, complexity_bench, evaluate, scaling_run, EvalReport, DEFAULT_CUTOFFS};
use nextsession::synth::{self, Pattern, SynthConfig};
use nextsession::trainer::{config_hash, dataset_hash, train, Checkpoint, TrainConfig};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "nextsession", version, about = "Session-level next-session recommendation pipeline")]
struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic interaction log.
    Synth(SynthArgs),
    /// Ingest, sessionize and filter a raw log into a dataset directory.
    PrepareData(PrepareArgs),
    /// Train a model and write checkpoints, metrics and a report.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; the JSON report goes to stdout.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one model per rank-loss weight.
    SweepAlpha(SweepArgs),
    /// Train on growing chronological prefixes of the training data.
    Scaling(ScalingArgs),
    /// Attention cost at item level versus session level.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 10)]
    sessions: usize,
    #[arg(long, default_value = "copy-last-session")]
    pattern: Pattern,
    #[arg(long, default_value_t = 500)]
    catalog: usize,
    #[arg(long, default_value_t = 5)]
    positives: usize,
    #[arg(long, default_value_t = 3)]
    negatives: usize,
    /// Items per topic (hard-negative pattern).
    #[arg(long, default_value_t = 20)]
    topic_size: usize,
    /// Items of each followed topic a user clicks (hard-negative pattern).
    #[arg(long, default_value_t = 5)]
    good_per_topic: usize,
    /// Topics each user follows (hard-negative pattern).
    #[arg(long, default_value_t = 2)]
    user_topics: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// CSV destination, with its manifest beside it; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Dataset directory to create.
    #[arg(long)]
    output: PathBuf,
    /// Keep only each user's most recent positives.
    #[arg(long)]
    max_pos_len: Option<usize>,
    #[arg(long, default_value_t = 5)]
    min_feedback: usize,
    #[arg(long, default_value_t = 3)]
    min_sessions: usize,
}

/// Flags that override the config file, which overrides the defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(v) = self.dim {
            cfg.model.d = v;
        }
        if let Some(v) = self.negatives {
            cfg.loss.num_negatives = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from prepare-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "session")]
    protocol: Protocol,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "session")]
    protocol: Protocol,
    /// Refuse checkpoints whose model section differs from this config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate despite a configuration or dataset mismatch.
    #[arg(long)]
    force: bool,
    /// Also write report.json and report.txt here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0])]
    alphas: Vec<f64>,
    #[arg(long, default_value = "session")]
    protocol: Protocol,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
    fractions: Vec<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Item-level sequence length.
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Items per session.
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_split(dir: &Path, protocol: Protocol) -> Result<(DatasetSplit, nextsession::data::Catalog)> {
    let (ds, meta) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let split = make_split(&ds, protocol, meta.max_positive_length);
    if split.users.is_empty() {
        bail!("no user in {} can be split under {protocol}", dir.display());
    }
    Ok((split, ds.catalog))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("report.txt"), report.to_table())?;
    Ok(())
}

/// Runs `work` between the two writes of `dir/manifest.json`.
fn recorded(manifest: RunManifest, dir: Option<&Path>, work: impl FnOnce() -> Result<()>) -> Result<()> {
    recorded_at(manifest, dir.map(|d| d.join("manifest.json")), work)
}

fn recorded_at(manifest: RunManifest, path: Option<PathBuf>, work: impl FnOnce() -> Result<()>) -> Result<()> {
    let mut manifest = manifest.start(path)?;
    let outcome = work();
    manifest.finish(&outcome)?;
    outcome
}

fn synth_cmd(a: SynthArgs, threads: usize) -> Result<()> {
    let cfg = SynthConfig {
        pattern: a.pattern,
        users: a.users,
        sessions: a.sessions,
        catalog: a.catalog,
        positives: a.positives,
        negatives: a.negatives,
        topic_size: a.topic_size,
        good_per_topic: a.good_per_topic,
        user_topics: a.user_topics,
        seed: a.seed,
    };
    let rows = synth::generate(&cfg)?;
    match &a.output {
        Some(path) => {
            let m = RunManifest::new("synth", threads).config(&cfg).seed(cfg.seed).output(path);
            let mut manifest_path = path.clone().into_os_string();
            manifest_path.push(".manifest.json");
            recorded_at(m, Some(manifest_path.into()), || {
                synth::write_csv(&rows, fs::File::create(path)?)?;
                info!("wrote {} rows to {}", rows.len(), path.display());
                Ok(())
            })
        }
        None => Ok(synth::write_csv(&rows, std::io::stdout().lock())?),
    }
}

fn prepare_cmd(a: PrepareArgs, threads: usize) -> Result<()> {
    let filter = FilterConfig {
        min_feedback: a.min_feedback,
        min_sessions: a.min_sessions,
        ..FilterConfig::default()
    };
    let meta = DatasetMeta::new(a.max_pos_len, filter.clone());
    let m = RunManifest::new("prepare-data", threads).config(&meta).input(&a.input).output(&a.output);
    recorded(m, Some(&a.output), || {
        let log = ingest(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
        let ds = filter_dataset(&log, &filter)?;
        write_dataset(&a.output, &ds, &meta)?;
        info!(
            "{} users, {} items, {} sessions",
            ds.sequences.len(),
            ds.catalog.len(),
            ds.num_sessions()
        );
        Ok(())
    })
}

fn train_cmd(a: TrainArgs, threads: usize) -> Result<()> {
    let cfg = a.config.resolve()?;
    let m = RunManifest::new("train", threads)
        .config(&cfg)
        .seed(cfg.seed)
        .input(&a.data)
        .output(&a.out);
    recorded(m, Some(&a.out), || {
        let (split, catalog) = load_split(&a.data, a.protocol)?;
        fs::write(a.out.join("config.toml"), cfg.to_toml())?;
        let outcome = train(&split, &catalog, &cfg, |e| {
            info!(
                "epoch {:>4}  loss {:.5}  ({:.2}s){}",
                e.epoch,
                e.loss,
                e.seconds,
                e.validation
                    .as_ref()
                    .map(|v| v.iter().map(|c| format!("  R@{} {:.4}", c.k, c.recall)).collect::<String>())
                    .unwrap_or_default()
            )
        })?;
        outcome.write(&a.out)?;
        let report = evaluate(&outcome.model, &split, &DEFAULT_CUTOFFS, &config_hash(&cfg.model))?;
        write_report(&a.out, &report)?;
        print!("{}", report.to_table());
        Ok(())
    })
}

fn evaluate_cmd(a: EvaluateArgs, threads: usize) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let mut m = RunManifest::new("evaluate", threads)
        .config(&ckpt.config)
        .input(&a.checkpoint)
        .input(&a.data);
    if let Some(out) = &a.out {
        m = m.output(out);
    }
    recorded(m, a.out.as_deref(), || {
        if let Some(path) = &a.config {
            ckpt.check_config(&TrainConfig::load(path)?.model, a.force)?;
        }
        let (split, _) = load_split(&a.data, a.protocol)?;
        if !a.force && a.protocol == Protocol::LeaveOneSessionOut && ckpt.dataset_hash != dataset_hash(&split) {
            bail!(
                "checkpoint was trained on a different dataset (hash {}); pass --force to evaluate anyway",
                &ckpt.dataset_hash[..12]
            );
        }
        let model = ckpt.model()?;
        let report = evaluate(&model, &split, &DEFAULT_CUTOFFS, &ckpt.config_hash)?;
        if let Some(out) = &a.out {
            write_report(out, &report)?;
        }
        println!("{}", serde_json::to_string_pretty(&report)?);
        Ok(())
    })
}

fn sweep_cmd(a: SweepArgs, threads: usize) -> Result<()> {
    let cfg = a.config.resolve()?;
    let m = RunManifest::new("sweep-alpha", threads)
        .config(&serde_json::json!({ "train": cfg, "alphas": a.alphas }))
        .seed(cfg.seed)
        .input(&a.data)
        .output(&a.out);
    recorded(m, Some(&a.out), || {
        let (split, catalog) = load_split(&a.data, a.protocol)?;
        let rows = alpha_sweep(&split, &catalog, &cfg, &a.alphas)?;
        fs::write(a.out.join("sweep.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        let mut w = csv::Writer::from_path(a.out.join("sweep.csv"))?;
        let mut header = vec!["alpha".to_string()];
        for k in DEFAULT_CUTOFFS {
            header.push(format!("recall@{k}"));
            header.push(format!("ndcg@{k}"));
        }
        header.push("error".into());
        w.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![r.alpha.to_string()];
            for k in DEFAULT_CUTOFFS {
                let cell = |f: fn(&EvalReport, usize) -> f64| r.report.as_ref().map(|rep| f(rep, k).to_string()).unwrap_or_default();
                rec.push(cell(EvalReport::recall));
                rec.push(cell(EvalReport::ndcg));
            }
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        let mut out = std::io::stdout().lock();
        writeln!(out, "{:>8}  {:>10}  {:>10}  {:>10}", "alpha", "NDCG@10", "Recall@10", "Recall@500")?;
        for r in &rows {
            match &r.report {
                Some(rep) => writeln!(out, "{:>8}  {:>10.6}  {:>10.6}  {:>10.6}", r.alpha, rep.ndcg(10), rep.recall(10), rep.recall(500))?,
                None => writeln!(out, "{:>8}  failed: {}", r.alpha, r.error.as_deref().unwrap_or(""))?,
            }
        }
        Ok(())
    })
}

fn scaling_cmd(a: ScalingArgs, threads: usize) -> Result<()> {
    let cfg = a.config.resolve()?;
    let m = RunManifest::new("scaling", threads)
        .config(&serde_json::json!({ "train": cfg, "fractions": a.fractions }))
        .seed(cfg.seed)
        .input(&a.data)
        .output(&a.out);
    recorded(m, Some(&a.out), || {
        let (split, catalog) = load_split(&a.data, Protocol::LeaveOneSessionOut)?;
        let rows = scaling_run(&split, &catalog, &cfg, &a.fractions)?;
        fs::write(a.out.join("scaling.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        let mut w = csv::Writer::from_path(a.out.join("scaling.csv"))?;
        w.write_record(["fraction", "train_items", "recall@500", "skipped"])?;
        for r in &rows {
            w.write_record([
                r.fraction.to_string(),
                r.train_items.to_string(),
                r.recall_at_500.map(|v| v.to_string()).unwrap_or_default(),
                r.skipped.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        let mut out = std::io::stdout().lock();
        writeln!(out, "{:>8}  {:>12}  {:>10}", "fraction", "train_items", "Recall@500")?;
        for r in &rows {
            let recall = r.recall_at_500.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            writeln!(out, "{:>8}  {:>12}  {:>10}", r.fraction, r.train_items, recall)?;
        }
        Ok(())
    })
}

fn bench_cmd(a: BenchArgs, threads: usize) -> Result<()> {
    let mut m = RunManifest::new("bench", threads).config(&serde_json::json!({ "n": a.n, "m": a.m, "repeats": a.repeats }));
    if let Some(out) = &a.out {
        m = m.output(out);
    }
    recorded(m, a.out.as_deref(), || {
        let report = complexity_bench(a.n, a.m, a.repeats)?;
        let json = serde_json::to_string_pretty(&report)?;
        if let Some(out) = &a.out {
            fs::write(out.join("bench.json"), json.clone() + "\n")?;
        }
        println!("{json}");
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Cmd::Synth(a) => synth_cmd(a, threads),
        Cmd::PrepareData(a) => prepare_cmd(a, threads),
        Cmd::Train(a) => train_cmd(a, threads),
        Cmd::Evaluate(a) => evaluate_cmd(a, threads),
        Cmd::SweepAlpha(a) => sweep_cmd(a, threads),
        Cmd::Scaling(a) => scaling_cmd(a, threads),
        Cmd::Bench(a) => bench_cmd(a, threads),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 and usage text on bad arguments.
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
