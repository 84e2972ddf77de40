//! Seeded benchmark runs: the synthetic n- and beta-sweeps, single fits and
//! the held-out protocol on ingested triples, with their report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{compute_metrics_slices, cross_validate, theory_schedule, TheoryParams, TheorySchedule};
use crate::io::ingest_triples;
use crate::observation::ObservationSet;
use crate::pipeline::{fit, Algorithm, AlgorithmPipeline, Hyper, HyperGrid};
use crate::synth::{generate, rng_from_seed, ModelConfig};

const CV_SALT: u64 = 0x0c5f_01d5;
const RANK_SALT: u64 = 0x7a2c_0b11;
const SPLIT_SALT: u64 = 0x5b1f_7e57;
const SAMPLE_SALT: u64 = 0x05a3_91e5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sizes `n_values` at sparsity exponent `model.beta`.
    SynthNSweep,
    /// Exponents `beta_values` at size `model.n_users x model.n_items`.
    #[default]
    SynthBetaSweep,
    /// One synthetic setting, `model` as given.
    FitPredict,
    /// Repeated 90/10 splits of the observed cells of `input`.
    IngestEval,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SynthNSweep => "synth_n_sweep",
            Mode::SynthBetaSweep => "synth_beta_sweep",
            Mode::FitPredict => "fit_predict",
            Mode::IngestEval => "ingest_eval",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "synth_n_sweep" | "n_sweep" => Ok(Mode::SynthNSweep),
            "synth_beta_sweep" | "beta_sweep" => Ok(Mode::SynthBetaSweep),
            "fit_predict" => Ok(Mode::FitPredict),
            "ingest_eval" => Ok(Mode::IngestEval),
            _ => Err(Error::invalid(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Generator settings. Its seed is ignored: repeat `t` uses `seed + t`.
    pub model: ModelConfig,
    pub algorithms: Vec<Algorithm>,
    /// Base hyperparameters; grid axes override them when tuning.
    pub hyper: Hyper,
    pub grid: HyperGrid,
    /// Tune by cross-validation over `grid`; otherwise fit `hyper` directly.
    pub tune: bool,
    /// In synthetic modes, take the latent dimension and outcome rank from
    /// the generator instead of `hyper`.
    pub known_rank: bool,
    pub repeats: usize,
    pub folds: usize,
    pub n_values: Vec<usize>,
    pub beta_values: Vec<f64>,
    /// Triples file for `ingest_eval`.
    pub input: Option<PathBuf>,
    pub test_fraction: f64,
    /// Candidate ranks for `ingest_eval`; the latent dimension and ALS rank
    /// are tied.
    pub rank_grid: Vec<usize>,
    pub rank_folds: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Total (truth, prediction) pairs in `predictions_sample.csv`.
    pub sample_size: usize,
    pub histogram_bins: usize,
    /// Write wall-clock times into `report.csv`. Off by default so that the
    /// file is reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SynthBetaSweep,
            model: ModelConfig::default(),
            algorithms: vec![Algorithm::MnnAls, Algorithm::UsvtKnownRank],
            hyper: Hyper::default(),
            grid: HyperGrid::default(),
            tune: true,
            known_rank: true,
            repeats: 10,
            folds: 16,
            n_values: vec![100, 562, 3162],
            beta_values: vec![0.0, 1.0 / 6.0, 0.25],
            input: None,
            test_fraction: 0.1,
            rank_grid: (1..=10).collect(),
            rank_folds: 9,
            output_dir: PathBuf::from("mnn-run"),
            seed: 0,
            sample_size: 10_000,
            histogram_bins: 40,
            record_timing: false,
        }
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    /// Defaults for `mode`; the n-sweep runs at `beta = 1/4`.
    pub fn preset(mode: Mode) -> Self {
        let mut cfg = Self {
            mode,
            ..Self::default()
        };
        if mode == Mode::SynthNSweep {
            cfg.model.beta = 0.25;
        }
        cfg
    }

    /// Parses a JSON config; fields it omits come from the preset of its mode.
    pub fn from_json(text: &str) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        let mode = match overlay.get("mode") {
            Some(m) => serde_json::from_value(m.clone())?,
            None => Mode::default(),
        };
        let mut base = serde_json::to_value(Self::preset(mode))?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m.to_owned()));
        if self.repeats == 0 {
            return fail("repeats must be at least 1");
        }
        if self.folds < 2 || self.rank_folds < 2 {
            return fail("cross-validation needs at least 2 folds");
        }
        if self.algorithms.is_empty() {
            return fail("no algorithms selected");
        }
        if self.histogram_bins == 0 {
            return fail("histogram_bins must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return fail("test_fraction must lie in (0, 1)");
        }
        if self.rank_grid.is_empty() || self.rank_grid.contains(&0) {
            return fail("rank_grid must be nonempty and positive");
        }
        match self.mode {
            Mode::SynthNSweep if self.n_values.is_empty() => return fail("n_values is empty"),
            Mode::SynthBetaSweep if self.beta_values.is_empty() => return fail("beta_values is empty"),
            Mode::IngestEval if self.input.is_none() => return fail("ingest_eval needs an input file"),
            _ => {}
        }
        for setting in self.settings() {
            setting.validate()?;
        }
        Ok(())
    }

    /// Generator configs of the synthetic settings, seeds unset.
    pub fn settings(&self) -> Vec<ModelConfig> {
        let with = |n_users: usize, n_items: usize, beta: f64| ModelConfig {
            n_users,
            n_items,
            beta,
            ..self.model.clone()
        };
        match self.mode {
            Mode::SynthNSweep => self.n_values.iter().map(|&n| with(n, n, self.model.beta)).collect(),
            Mode::SynthBetaSweep => self
                .beta_values
                .iter()
                .map(|&b| with(self.model.n_users, self.model.n_items, b))
                .collect(),
            Mode::FitPredict => vec![self.model.clone()],
            Mode::IngestEval => vec![],
        }
    }

    fn repeat_seed(&self, t: usize) -> u64 {
        self.seed.wrapping_add(t as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub cv_seconds: f64,
    pub fit_seconds: f64,
}

/// One algorithm on one repeat of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub n: usize,
    pub repeat: usize,
    pub seed: u64,
    pub r2: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub n_evaluated: usize,
    /// Hyperparameters used for the final fit.
    pub hyper: Option<Hyper>,
    /// Mean held-out MSE of the chosen grid point.
    pub cv_mse: Option<f64>,
    pub timing: Timing,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, sd })
    }

    fn close_to(&self, other: &Self) -> bool {
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        near(self.mean, other.mean) && near(self.sd, other.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub n: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub r2: Option<Summary>,
    pub mse: Option<Summary>,
    pub mae: Option<Summary>,
}

/// Bound diagnostics of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingTheory {
    pub n: usize,
    pub beta: f64,
    pub d: usize,
    pub schedule: TheorySchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub aggregate: Vec<Aggregate>,
    pub theory: Vec<SettingTheory>,
    pub notes: Vec<String>,
}

fn summarize(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(Algorithm, u64, usize)> = Vec::new();
    for r in rows {
        let key = (r.algorithm, r.beta.to_bits(), r.n);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(algorithm, beta, n)| {
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.algorithm == algorithm && r.beta.to_bits() == beta && r.n == n)
                .collect();
            let pick = |f: fn(&ReportRow) -> Option<f64>| {
                Summary::of(&group.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let n_ok = group.iter().filter(|r| r.error.is_none()).count();
            Aggregate {
                algorithm,
                beta: f64::from_bits(beta),
                n,
                n_ok,
                n_failed: group.len() - n_ok,
                r2: pick(|r| r.r2),
                mse: pick(|r| r.mse),
                mae: pick(|r| r.mae),
            }
        })
        .collect()
}

impl RunReport {
    /// Reads `report.json` and checks that the aggregate matches its rows.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let report: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        report.check_aggregate()?;
        Ok(report)
    }

    pub fn check_aggregate(&self) -> Result<()> {
        let fresh = summarize(&self.rows);
        let same = |a: &Option<Summary>, b: &Option<Summary>| match (a, b) {
            (Some(a), Some(b)) => a.close_to(b),
            (None, None) => true,
            _ => false,
        };
        let ok = fresh.len() == self.aggregate.len()
            && fresh.iter().zip(&self.aggregate).all(|(f, a)| {
                f.algorithm == a.algorithm
                    && f.beta == a.beta
                    && f.n == a.n
                    && f.n_ok == a.n_ok
                    && f.n_failed == a.n_failed
                    && same(&f.r2, &a.r2)
                    && same(&f.mse, &a.mse)
                    && same(&f.mae, &a.mae)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("report aggregate does not match its rows"))
        }
    }

    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.error.is_some())
    }

    /// Rows of one algorithm and setting, in repeat order.
    pub fn rows_for(&self, algorithm: Algorithm, beta: f64, n: usize) -> Vec<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.algorithm == algorithm && r.beta == beta && r.n == n)
            .collect()
    }

    pub fn format_table(&self) -> String {
        let cell = |s: &Option<Summary>| s.map_or("-".to_owned(), |s| format!("{:.3} ± {:.3}", s.mean, s.sd));
        let mut out = format!(
            "{:<16} {:>7} {:>6} {:>18} {:>18} {:>18} {:>7}\n",
            "algorithm", "beta", "n", "R2", "MSE", "MAE", "ok/all"
        );
        for a in &self.aggregate {
            let _ = writeln!(
                out,
                "{:<16} {:>7.4} {:>6} {:>18} {:>18} {:>18} {:>7}",
                a.algorithm.name(),
                a.beta,
                a.n,
                cell(&a.r2),
                cell(&a.mse),
                cell(&a.mae),
                format!("{}/{}", a.n_ok, a.n_ok + a.n_failed)
            );
        }
        out
    }

    /// The `report.csv` table.
    pub fn to_csv(&self) -> String {
        let num = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut out = String::from("algorithm,beta,n,repeat,r2,mse,mae,fit_seconds\n");
        for r in &self.rows {
            let seconds = self
                .config
                .record_timing
                .then_some(r.timing.cv_seconds + r.timing.fit_seconds);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.algorithm.name(),
                r.beta,
                r.n,
                r.repeat,
                num(r.r2),
                num(r.mse),
                num(r.mae),
                num(seconds)
            );
        }
        out
    }
}

/// Scatter sample of one algorithm and setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub n: usize,
    pub repeat: usize,
    pub pairs: Vec<(f64, f64)>,
}

/// Shared-bin histogram of truth and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBlock {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub n: usize,
    pub repeat: usize,
    pub edges: Vec<f64>,
    pub truth_counts: Vec<usize>,
    pub prediction_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub samples: Vec<SampleBlock>,
    pub histograms: Vec<HistogramBlock>,
}

/// Equal-width bins over the joint range of both series; the last bin is
/// closed.
pub fn shared_histogram(truth: &[f64], pred: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let all = truth.iter().chain(pred);
    let lo = all.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = all.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|b| lo + width * b as f64).collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0; bins];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            c[b] += 1;
        }
        c
    };
    (edges, count(truth), count(pred))
}

struct Evaluated {
    truth: Vec<f64>,
    pred: Vec<f64>,
}

struct Artifacts<'a> {
    config: &'a ExperimentConfig,
    per_group: usize,
    samples: Vec<SampleBlock>,
    histograms: Vec<HistogramBlock>,
}

impl Artifacts<'_> {
    fn record(&mut self, row: &ReportRow, data: &Evaluated) {
        let seen = self
            .histograms
            .iter()
            .any(|h| h.algorithm == row.algorithm && h.beta == row.beta && h.n == row.n);
        if seen {
            return;
        }
        let (edges, truth_counts, prediction_counts) =
            shared_histogram(&data.truth, &data.pred, self.config.histogram_bins);
        self.histograms.push(HistogramBlock {
            algorithm: row.algorithm,
            beta: row.beta,
            n: row.n,
            repeat: row.repeat,
            edges,
            truth_counts,
            prediction_counts,
        });
        let mut rng = rng_from_seed(row.seed ^ SAMPLE_SALT);
        let take = self.per_group.min(data.truth.len());
        let mut picked = index::sample(&mut rng, data.truth.len(), take).into_vec();
        picked.sort_unstable();
        self.samples.push(SampleBlock {
            algorithm: row.algorithm,
            beta: row.beta,
            n: row.n,
            repeat: row.repeat,
            pairs: picked.into_iter().map(|k| (data.truth[k], data.pred[k])).collect(),
        });
    }
}

fn schedule_radius(n: usize, d: usize, beta: f64) -> f64 {
    (n as f64).powf(-(1.0 - beta / 2.0) / d as f64)
}

/// Chooses hyperparameters for `algorithm` on `train`, by cross-validation
/// when the grid has more than one point. Returns the choice and its CV score.
fn tune(
    train: &ObservationSet,
    algorithm: Algorithm,
    points: &[Hyper],
    folds: usize,
    seed: u64,
) -> Result<(Hyper, Option<f64>)> {
    if points.len() == 1 {
        return Ok((points[0], None));
    }
    let cv = cross_validate(train, folds, points, &AlgorithmPipeline { algorithm }, &mut rng_from_seed(seed))?;
    Ok((cv.best_params, Some(cv.mean_scores[cv.best_index])))
}

fn failed_row(algorithm: Algorithm, beta: f64, n: usize, repeat: usize, seed: u64, err: &Error) -> ReportRow {
    warn!("{algorithm} beta={beta} n={n} repeat={repeat}: {err}");
    ReportRow {
        algorithm,
        beta,
        n,
        repeat,
        seed,
        r2: None,
        mse: None,
        mae: None,
        n_evaluated: 0,
        hyper: None,
        cv_mse: None,
        timing: Timing::default(),
        error: Some(err.to_string()),
    }
}

/// Tunes, fits and scores one algorithm; `score_cells` lists the cells to
/// evaluate (all cells when `None`) against `truth_of`.
#[allow(clippy::too_many_arguments)]
fn run_one(
    config: &ExperimentConfig,
    train: &ObservationSet,
    algorithm: Algorithm,
    points: &[Hyper],
    cells: Option<&[(usize, usize)]>,
    truth_of: &dyn Fn(usize, usize, usize) -> f64,
    seed: u64,
) -> Result<(ReportRow, Evaluated)> {
    let started = Instant::now();
    let (hyper, cv_mse) = tune(train, algorithm, points, config.folds, seed ^ CV_SALT)?;
    let cv_seconds = started.elapsed().as_secs_f64();
    let started = Instant::now();
    let model = fit(train, algorithm, &hyper)?;
    let fit_seconds = started.elapsed().as_secs_f64();
    let (truth, pred): (Vec<f64>, Vec<f64>) = match cells {
        Some(cells) => cells
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| (truth_of(k, i, j), model.predict_cell(i, j)))
            .unzip(),
        None => {
            let (n, m) = model.dim();
            let full = model.predict_full();
            (0..n)
                .flat_map(|i| (0..m).map(move |j| (i, j)))
                .map(|(i, j)| (truth_of(i * m + j, i, j), full[[i, j]]))
                .unzip()
        }
    };
    let metrics = compute_metrics_slices(&pred, &truth)?;
    let row = ReportRow {
        algorithm,
        beta: 0.0,
        n: 0,
        repeat: 0,
        seed,
        r2: metrics.r2,
        mse: Some(metrics.mse),
        mae: Some(metrics.mae),
        n_evaluated: metrics.n_evaluated,
        hyper: Some(hyper),
        cv_mse,
        timing: Timing { cv_seconds, fit_seconds },
        error: None,
    };
    Ok((row, Evaluated { truth, pred }))
}

fn theory_for(n: usize, d: usize, beta: f64, sigma: f64, notes: &mut Vec<String>) -> Option<SettingTheory> {
    match theory_schedule(&TheoryParams::for_exp_separable(n, d, beta, sigma)) {
        Ok(schedule) => {
            if !schedule.admissible {
                let msg = format!(
                    "beta = {beta} is not below the admissibility threshold {:?} for d = {d}; guarantees do not apply",
                    schedule.gamma_d
                );
                warn!("{msg}");
                notes.push(msg);
            }
            Some(SettingTheory { n, beta, d, schedule })
        }
        Err(e) => {
            notes.push(format!("no theory schedule for n = {n}, d = {d}, beta = {beta}: {e}"));
            None
        }
    }
}

fn synthetic_base(config: &ExperimentConfig, model: &ModelConfig) -> Hyper {
    let mut base = config.hyper;
    if config.known_rank {
        base.d = model.d;
        base.als.rank = model.r;
        base.rank = model.r;
    }
    base
}

fn grid_points(config: &ExperimentConfig, algorithm: Algorithm, base: &Hyper, n: usize, beta: f64) -> Vec<Hyper> {
    if !config.tune {
        return vec![*base];
    }
    config
        .grid
        .with_epsilon_scale(schedule_radius(n, base.d, beta))
        .expand(base, algorithm)
}

fn run_synthetic(config: &ExperimentConfig, artifacts: &mut Artifacts<'_>) -> (Vec<ReportRow>, Vec<SettingTheory>, Vec<String>) {
    let mut rows = Vec::new();
    let mut theory = Vec::new();
    let mut notes = Vec::new();
    if config.mode == Mode::SynthBetaSweep {
        notes.push(format!(
            "every beta column uses n_users = {}, n_items = {}",
            config.model.n_users, config.model.n_items
        ));
    }
    for setting in config.settings() {
        let n = setting.n_users.min(setting.n_items);
        let beta = setting.beta;
        theory.extend(theory_for(n, setting.d, beta, setting.noise_sigma, &mut notes));
        for t in 0..config.repeats {
            let seed = config.repeat_seed(t);
            let model = ModelConfig { seed, ..setting.clone() };
            info!("n={} beta={beta:.4} repeat {t}", setting.n_users);
            let data = match generate(&model) {
                Ok(d) => d,
                Err(e) => {
                    for &a in &config.algorithms {
                        rows.push(failed_row(a, beta, setting.n_users, t, seed, &e));
                    }
                    continue;
                }
            };
            let x = &data.truth.x;
            let truth_of = |_: usize, i: usize, j: usize| x[[i, j]];
            for &algorithm in &config.algorithms {
                let base = synthetic_base(config, &model);
                let points = grid_points(config, algorithm, &base, n, beta);
                match run_one(config, &data.observations, algorithm, &points, None, &truth_of, seed) {
                    Ok((mut row, evaluated)) => {
                        row.beta = beta;
                        row.n = setting.n_users;
                        row.repeat = t;
                        artifacts.record(&row, &evaluated);
                        rows.push(row);
                    }
                    Err(e) => rows.push(failed_row(algorithm, beta, setting.n_users, t, seed, &e)),
                }
            }
        }
    }
    (rows, theory, notes)
}

/// Sparsity exponent implied by the observed fraction, with the observation
/// probability taken as twice the fraction.
pub fn implied_beta(obs: &ObservationSet) -> f64 {
    let n = obs.n_users().min(obs.n_items()) as f64;
    let rho = (2.0 * obs.observed_fraction()).min(1.0);
    if n < 2.0 || rho <= 0.0 {
        return 0.0;
    }
    (-rho.ln() / n.ln()).clamp(0.0, 0.99)
}

/// Splits the observed cells into a training set and held-out positions.
pub fn holdout_split(obs: &ObservationSet, test_fraction: f64, seed: u64) -> Result<(ObservationSet, Vec<usize>)> {
    let len = obs.len();
    let n_test = ((len as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= len {
        return Err(Error::invalid(format!(
            "a test fraction of {test_fraction} leaves no train or test cells out of {len}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_from_seed(seed ^ SPLIT_SALT));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((obs.select(&train), test))
}

/// Rank shared by all algorithms of a repeat: cross-validated MNN over
/// `rank_grid` when MNN is among the algorithms, otherwise the USVT fit.
fn select_rank(config: &ExperimentConfig, train: &ObservationSet, beta: f64, seed: u64) -> Result<usize> {
    if !config.tune || config.rank_grid.len() == 1 {
        return Ok(config.rank_grid[0]);
    }
    let n = train.n_users().min(train.n_items());
    let scale = config.grid.epsilon_scale.first().copied().unwrap_or(0.5);
    let algorithm = config
        .algorithms
        .iter()
        .copied()
        .find(|a| a.is_mnn())
        .unwrap_or(config.algorithms[0]);
    let points: Vec<Hyper> = config
        .rank_grid
        .iter()
        .map(|&r| {
            let mut h = config.hyper;
            h.d = r;
            h.als.rank = r;
            h.rank = r;
            if config.grid.epsilon.is_empty() {
                h.epsilon = scale * schedule_radius(n, r, beta);
            }
            h
        })
        .collect();
    let cv = cross_validate(
        train,
        config.rank_folds,
        &points,
        &AlgorithmPipeline { algorithm },
        &mut rng_from_seed(seed ^ RANK_SALT),
    )?;
    Ok(cv.best_params.als.rank)
}

/// The repeated held-out protocol on an in-memory observation set: each
/// repeat holds out `test_fraction` of the observed cells, tunes on the
/// rest and scores on the held-out cells.
pub fn evaluate_holdout(obs: &ObservationSet, config: &ExperimentConfig) -> Vec<ReportRow> {
    holdout_rows(obs, config, &mut |_, _| {})
}

fn holdout_rows(
    obs: &ObservationSet,
    config: &ExperimentConfig,
    sink: &mut dyn FnMut(&ReportRow, &Evaluated),
) -> Vec<ReportRow> {
    let beta = implied_beta(obs);
    let n = obs.n_users();
    let entries = obs.entries();
    let mut rows = Vec::new();
    for t in 0..config.repeats {
        let seed = config.repeat_seed(t);
        let prepared = holdout_split(obs, config.test_fraction, seed).and_then(|(train, test)| {
            let rank = select_rank(config, &train, beta, seed)?;
            Ok((train, test, rank))
        });
        let (train, test, rank) = match prepared {
            Ok(p) => p,
            Err(e) => {
                for &a in &config.algorithms {
                    rows.push(failed_row(a, beta, n, t, seed, &e));
                }
                continue;
            }
        };
        info!("holdout repeat {t}: rank {rank}");
        let cells: Vec<(usize, usize)> = test.iter().map(|&k| (entries[k].row, entries[k].col)).collect();
        let truth_of = |k: usize, _: usize, _: usize| entries[test[k]].value;
        for &algorithm in &config.algorithms {
            let mut base = config.hyper;
            base.d = rank;
            base.als.rank = rank;
            base.rank = rank;
            let points = grid_points(config, algorithm, &base, obs.n_users().min(obs.n_items()), beta);
            match run_one(config, &train, algorithm, &points, Some(&cells), &truth_of, seed) {
                Ok((mut row, evaluated)) => {
                    row.beta = beta;
                    row.n = n;
                    row.repeat = t;
                    sink(&row, &evaluated);
                    rows.push(row);
                }
                Err(e) => rows.push(failed_row(algorithm, beta, n, t, seed, &e)),
            }
        }
    }
    rows
}

/// Runs the experiment without writing files.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let groups = match config.mode {
        Mode::IngestEval => 1,
        _ => config.settings().len(),
    } * config.algorithms.len();
    let mut artifacts = Artifacts {
        config,
        per_group: config.sample_size / groups.max(1),
        samples: Vec::new(),
        histograms: Vec::new(),
    };
    let (rows, theory, notes) = match config.mode {
        Mode::IngestEval => {
            let path = config.input.as_ref().expect("validated");
            let ingested = ingest_triples(path)?;
            let obs = &ingested.observations;
            let mut notes = vec![
                format!("rank grid {:?} ({}-fold), shared by all algorithms", config.rank_grid, config.rank_folds),
                format!("sparsity exponent implied by the observed fraction: {:.4}", implied_beta(obs)),
            ];
            let rows = holdout_rows(obs, config, &mut |row, data| artifacts.record(row, data));
            let theory = theory_for(
                obs.n_users().min(obs.n_items()),
                config.hyper.d,
                implied_beta(obs),
                config.model.noise_sigma,
                &mut notes,
            );
            (rows, theory.into_iter().collect(), notes)
        }
        _ => run_synthetic(config, &mut artifacts),
    };
    let aggregate = summarize(&rows);
    Ok(RunOutput {
        report: RunReport {
            config: config.clone(),
            rows,
            aggregate,
            theory,
            notes,
        },
        samples: artifacts.samples,
        histograms: artifacts.histograms,
    })
}

/// Writes `report.csv`, `report.json`, `predictions_sample.csv` and
/// `histogram.csv` into `dir`.
pub fn write_outputs(output: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), output.report.to_csv())?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&output.report)?)?;

    let mut samples = String::from("algorithm,beta,n,repeat,truth,prediction\n");
    for block in &output.samples {
        for (truth, pred) in &block.pairs {
            let _ = writeln!(samples, "{},{},{},{},{truth},{pred}", block.algorithm.name(), block.beta, block.n, block.repeat);
        }
    }
    fs::write(dir.join("predictions_sample.csv"), samples)?;

    let mut hist = String::from("algorithm,beta,n,repeat,bin,lower,upper,truth_count,prediction_count\n");
    for h in &output.histograms {
        for b in 0..h.truth_counts.len() {
            let _ = writeln!(
                hist,
                "{},{},{},{},{b},{},{},{},{}",
                h.algorithm.name(),
                h.beta,
                h.n,
                h.repeat,
                h.edges[b],
                h.edges[b + 1],
                h.truth_counts[b],
                h.prediction_counts[b]
            );
        }
    }
    fs::write(dir.join("histogram.csv"), hist)?;
    Ok(())
}

/// Runs the experiment and writes its files into `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let output = execute(config)?;
    write_outputs(&output, &config.output_dir)?;
    Ok(output)
}
