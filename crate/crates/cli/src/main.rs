use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use mnn::eval::{compute_metrics_slices, cross_validate};
use mnn::experiment::{implied_beta, run_experiment, ExperimentConfig, Mode};
use mnn::io::{export_triples, ingest_triples, Ingested};
use mnn::pipeline::{fit, Algorithm, AlgorithmPipeline, Hyper};
use mnn::synth::{generate, rng_from_seed, ModelConfig};

/// Mask nearest neighbors matrix completion for data missing not at random.
#[derive(Parser, Debug)]
#[command(name = "mnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: observed triples, full truth and config.
    Synth(SynthArgs),
    /// Re-index a triples file densely and report its shape.
    Ingest(IngestArgs),
    /// Fit an estimator on a triples file and save it as JSON.
    Fit(FitArgs),
    /// Predict cells from a saved model.
    Predict(PredictArgs),
    /// Score predicted triples against true triples.
    Evaluate(EvaluateArgs),
    /// Run a benchmark experiment and write its report files.
    Experiment(ExperimentArgs),
}

/// Flags shared by the commands that read an experiment config.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment config; flags win over the file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
}

impl Overrides {
    fn resolve(&self, mode: Option<Mode>) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?,
            None => ExperimentConfig::preset(mode.unwrap_or_default()),
        };
        if let Some(mode) = mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(a) = self.algorithm {
            cfg.algorithms = vec![a];
        }
        if let Some(b) = self.beta {
            cfg.model.beta = b;
            cfg.beta_values = vec![b];
        }
        if let Some(n) = self.n {
            cfg.model.n_users = n;
            cfg.model.n_items = n;
            cfg.n_values = vec![n];
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Latent dimension (also the outcome rank).
    #[arg(long)]
    d: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Directory for the re-indexed triples and the ID maps.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Triples file `user,item,value`.
    #[arg(long)]
    input: PathBuf,
    /// Cross-validate over the config grid instead of fitting its base
    /// hyperparameters.
    #[arg(long)]
    tune: bool,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with `user,item` columns; every cell when omitted.
    #[arg(long)]
    cells: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predicted triples.
    #[arg(long)]
    predictions: PathBuf,
    /// True triples; every one of them must be predicted.
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// synth_n_sweep, synth_beta_sweep, fit_predict or ingest_eval.
    #[arg(long)]
    mode: Option<Mode>,
    /// Triples file for ingest_eval.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// A fitted estimator together with the IDs it was fitted on.
#[derive(Debug, Serialize, Deserialize)]
struct SavedModel {
    algorithm: Algorithm,
    hyper: Hyper,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    model: mnn::Model,
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = args.overrides.resolve(None)?;
    let mut model = ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    if let Some(d) = args.d {
        model.d = d;
        model.r = d;
    }
    let data = generate(&model)?;
    fs::create_dir_all(&args.out)?;
    export_triples(args.out.join("observations.csv"), &data.observations, None, None)?;
    let (n, m) = data.truth.x.dim();
    let mut truth = csv::Writer::from_path(args.out.join("truth.csv"))?;
    truth.write_record(["user", "item", "value"])?;
    for i in 0..n {
        for j in 0..m {
            truth.write_record([i.to_string(), j.to_string(), data.truth.x[[i, j]].to_string()])?;
        }
    }
    truth.flush()?;
    fs::write(args.out.join("model.json"), serde_json::to_string_pretty(&model)?)?;
    println!(
        "{}",
        serde_json::json!({
            "n_users": n,
            "n_items": m,
            "observed": data.observations.len(),
            "observed_fraction": data.observations.observed_fraction(),
        })
    );
    Ok(())
}

fn write_ids(path: &Path, ids: &[String]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "id"])?;
    for (k, id) in ids.iter().enumerate() {
        w.write_record([k.to_string(), id.clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn ingest(args: &IngestArgs) -> anyhow::Result<()> {
    let Ingested {
        observations,
        user_ids,
        item_ids,
    } = ingest_triples(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        export_triples(out.join("observations.csv"), &observations, None, None)?;
        write_ids(&out.join("users.csv"), &user_ids)?;
        write_ids(&out.join("items.csv"), &item_ids)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "n_users": observations.n_users(),
            "n_items": observations.n_items(),
            "observed": observations.len(),
            "observed_fraction": observations.observed_fraction(),
            "implied_beta": implied_beta(&observations),
        })
    );
    Ok(())
}

fn fit_command(args: &FitArgs) -> anyhow::Result<()> {
    let cfg = args.overrides.resolve(None)?;
    let algorithm = args.overrides.algorithm.unwrap_or(Algorithm::MnnAls);
    let ingested = ingest_triples(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let obs = &ingested.observations;
    let mut hyper = cfg.hyper;
    if args.tune {
        let n = obs.n_users().min(obs.n_items());
        let beta = implied_beta(obs);
        let radius = (n as f64).powf(-(1.0 - beta / 2.0) / hyper.d as f64);
        let points = cfg.grid.with_epsilon_scale(radius).expand(&hyper, algorithm);
        if points.len() > 1 {
            let cv = cross_validate(
                obs,
                cfg.folds,
                &points,
                &AlgorithmPipeline { algorithm },
                &mut rng_from_seed(cfg.seed),
            )?;
            info!("cross-validated MSE {:.4}", cv.mean_scores[cv.best_index]);
            hyper = cv.best_params;
        }
    }
    let model = fit(obs, algorithm, &hyper)?;
    let saved = SavedModel {
        algorithm,
        hyper,
        user_ids: ingested.user_ids,
        item_ids: ingested.item_ids,
        model,
    };
    fs::write(&args.out, serde_json::to_string(&saved)?)?;
    println!("{}", serde_json::json!({ "algorithm": algorithm, "hyper": hyper }));
    Ok(())
}

fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let saved: SavedModel = serde_json::from_str(&text).context("parsing model file")?;
    let index = |ids: &[String]| -> HashMap<String, usize> {
        ids.iter().enumerate().map(|(k, id)| (id.clone(), k)).collect()
    };
    let (users, items) = (index(&saved.user_ids), index(&saved.item_ids));
    let cells: Vec<(usize, usize)> = match &args.cells {
        None => (0..saved.user_ids.len())
            .flat_map(|i| (0..saved.item_ids.len()).map(move |j| (i, j)))
            .collect(),
        Some(path) => {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
            let headers = rdr.headers()?.clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .with_context(|| format!("{} has no `{name}` column", path.display()))
            };
            let (u, v) = (col("user")?, col("item")?);
            let mut cells = Vec::new();
            for record in rdr.records() {
                let record = record?;
                let line = record.position().map_or(0, |p| p.line());
                let lookup = |map: &HashMap<String, usize>, k: usize, what: &str| {
                    let id = record.get(k).unwrap_or("");
                    map.get(id)
                        .copied()
                        .with_context(|| format!("line {line}: unknown {what} `{id}`"))
                };
                cells.push((lookup(&users, u, "user")?, lookup(&items, v, "item")?));
            }
            cells
        }
    };
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["user", "item", "value"])?;
    for (i, j) in cells {
        w.write_record([
            saved.user_ids[i].as_str(),
            saved.item_ids[j].as_str(),
            &saved.model.predict_cell(i, j).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let read = |p: &PathBuf| ingest_triples(p).with_context(|| format!("reading {}", p.display()));
    let pred = read(&args.predictions)?;
    let truth = read(&args.truth)?;
    let index = |ids: &[String]| -> HashMap<String, usize> {
        ids.iter().enumerate().map(|(k, id)| (id.clone(), k)).collect()
    };
    let (users, items) = (index(&pred.user_ids), index(&pred.item_ids));
    let mut p = Vec::with_capacity(truth.observations.len());
    let mut t = Vec::with_capacity(truth.observations.len());
    for e in truth.observations.entries() {
        let (user, item) = (&truth.user_ids[e.row], &truth.item_ids[e.col]);
        let predicted = users
            .get(user)
            .zip(items.get(item))
            .and_then(|(&i, &j)| pred.observations.get(i, j));
        match predicted {
            Some(v) => {
                p.push(v);
                t.push(e.value);
            }
            None => bail!("no prediction for ({user}, {item})"),
        }
    }
    let metrics = compute_metrics_slices(&p, &t)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn experiment(args: &ExperimentArgs) -> anyhow::Result<bool> {
    let mut cfg = args.overrides.resolve(args.mode)?;
    if let Some(input) = &args.input {
        cfg.input = Some(input.clone());
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let output = run_experiment(&cfg)?;
    println!("{}", output.report.format_table());
    println!("wrote {}", cfg.output_dir.display());
    Ok(!output.report.all_failed())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("MNN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| usage(format!("MNN_THREADS must be a count, got `{value}`")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Ingest(a) => ingest(a).map(|_| true),
        Command::Fit(a) => fit_command(a).map(|_| true),
        Command::Predict(a) => predict(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Experiment(a) => experiment(a),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: every repeat failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
