//! Command-line entry point: data generation, training, evaluation,
//! multiplier sweeps, gamma selection, and the oracle suites. Configuration
//! comes from `key = value` files overridden by flags; the fully resolved
//! config is echoed and written next to the artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, Dataset, SplitSpec};
use crate::fairness::GridSpec;
use crate::metrics;
use crate::model;
use crate::oracle::{self, OracleReport, SimConfig};
use crate::subsets::{self, SubsetCollection};
use crate::train::{self, Method, SweepRow, TrainConfig};
use crate::{Error, Result};

/// Everything one run needs: trainer knobs plus the split rule.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub split_seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            train: TrainConfig::default(),
            train_frac: 0.6,
            valid_frac: 0.2,
            test_frac: 0.2,
            split_seed: 0,
        }
    }
}

impl RunSettings {
    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.train_frac, self.valid_frac, self.test_frac, self.split_seed)
    }

    /// Applies one `key = value` pair; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::BadConfigValue { key: key.to_string(), value: value.to_string() };
        let parse_f = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let parse_u = |v: &str| v.parse::<u64>().map_err(|_| bad());
        let parse_us = |v: &str| v.parse::<usize>().map_err(|_| bad());
        match key {
            "method" => self.train.method = Method::parse(value)?,
            "lambda" => self.train.lambda = parse_f(value)?,
            "lr_cls" => self.train.lr_cls = parse_f(value)?,
            "lr_g" => self.train.lr_g = parse_f(value)?,
            "lr_v" => self.train.lr_v = parse_f(value)?,
            "epochs" => self.train.epochs = parse_us(value)?,
            "batch" => {
                self.train.batch =
                    if value == "full" { None } else { Some(parse_us(value)?) };
            }
            "hidden" => self.train.hidden = parse_us(value)?,
            "gamma" => self.train.gamma = parse_f(value)?,
            "orders" => self.train.orders = parse_orders(value)?,
            "seed" => self.train.seed = parse_u(value)?,
            "gf_temperature" => self.train.gf_temperature = parse_f(value)?,
            "clamp_eps" => self.train.clamp_eps = parse_f(value)?,
            "adversary_steps" => self.train.adversary_steps = parse_us(value)?,
            "train_frac" => self.train_frac = parse_f(value)?,
            "valid_frac" => self.valid_frac = parse_f(value)?,
            "test_frac" => self.test_frac = parse_f(value)?,
            "split_seed" => self.split_seed = parse_u(value)?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Echo of the resolved settings; parseable by `load_config`.
    pub fn resolved_text(&self) -> String {
        let batch = match self.train.batch {
            None => "full".to_string(),
            Some(b) => b.to_string(),
        };
        let orders: Vec<String> = self.train.orders.iter().map(|o| o.to_string()).collect();
        format!(
            "method = {}\nlambda = {}\nlr_cls = {}\nlr_g = {}\nlr_v = {}\nepochs = {}\n\
             batch = {}\nhidden = {}\ngamma = {}\norders = {}\nseed = {}\n\
             gf_temperature = {}\nclamp_eps = {}\nadversary_steps = {}\n\
             train_frac = {}\nvalid_frac = {}\ntest_frac = {}\nsplit_seed = {}\n",
            self.train.method.label(),
            self.train.lambda,
            self.train.lr_cls,
            self.train.lr_g,
            self.train.lr_v,
            self.train.epochs,
            batch,
            self.train.hidden,
            self.train.gamma,
            orders.join(","),
            self.train.seed,
            self.train.gf_temperature,
            self.train.clamp_eps,
            self.train.adversary_steps,
            self.train_frac,
            self.valid_frac,
            self.test_frac,
            self.split_seed,
        )
    }
}

fn parse_orders(value: &str) -> Result<Vec<usize>> {
    let mut orders = Vec::new();
    for field in value.split(',') {
        let o: usize = field.trim().parse().map_err(|_| Error::BadConfigValue {
            key: "orders".into(),
            value: value.to_string(),
        })?;
        orders.push(o);
    }
    Ok(orders)
}

/// Parses a line-oriented `key = value` config file. Blank lines and `#`
/// comments are allowed; unknown keys are errors.
pub fn load_config(path: &Path) -> Result<RunSettings> {
    let mut settings = RunSettings::default();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedRow {
            row: lineno,
            reason: format!("expected `key = value`, got `{line}`"),
        })?;
        settings.apply_kv(key.trim(), value.trim())?;
    }
    Ok(settings)
}

#[derive(Parser, Debug)]
#[command(name = "draf", version, about = "Subgroup-fair training, metrics and oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training / evaluation seed
    #[arg(long)]
    seed: Option<u64>,
    /// draf | reg | gf | none
    #[arg(long)]
    method: Option<String>,
    /// Fairness multiplier (penalty constant for the baselines)
    #[arg(long)]
    lambda: Option<f64>,
    /// Subset admission fraction
    #[arg(long)]
    gamma: Option<f64>,
    /// Marginal orders to include, e.g. 1,2
    #[arg(long)]
    orders: Option<String>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Custom subgroup-subset file (comma-separated bitmasks per line)
    #[arg(long)]
    custom_subsets: Option<PathBuf>,
}

impl CommonOpts {
    fn settings(&self) -> Result<RunSettings> {
        let mut settings = match &self.config {
            Some(path) => load_config(path)?,
            None => RunSettings::default(),
        };
        if let Some(seed) = self.seed {
            settings.train.seed = seed;
        }
        if let Some(method) = &self.method {
            settings.train.method = Method::parse(method)?;
        }
        if let Some(lambda) = self.lambda {
            settings.train.lambda = lambda;
        }
        if let Some(gamma) = self.gamma {
            settings.train.gamma = gamma;
        }
        if let Some(orders) = &self.orders {
            settings.train.orders = parse_orders(orders)?;
        }
        if let Some(epochs) = self.epochs {
            settings.train.epochs = epochs;
        }
        Ok(settings)
    }

    fn custom_sets(&self) -> Result<Vec<BTreeSet<u32>>> {
        match &self.custom_subsets {
            Some(path) => subsets::read_custom_subsets(path),
            None => Ok(Vec::new()),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a gerrymandered synthetic dataset CSV
    Generate {
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        q: usize,
        #[arg(long, default_value_t = 2.0)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train one model and evaluate it on the three splits
    Train {
        /// Dataset CSV
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate a checkpoint (or fixed scores) against a dataset
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file; required unless --fixed-scores is given
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train | valid | test | all
        #[arg(long, default_value = "all")]
        split: String,
        /// Score file (one score per line) evaluated on the whole dataset
        #[arg(long)]
        fixed_scores: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train over a multiplier grid and several seeds
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated multipliers; defaults to the method's grid
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated seeds
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Worker threads for the sweep
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Sweep per gamma candidate and pick the best Pareto-front area
    SelectGamma {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated gamma candidates
        #[arg(long)]
        gammas: Option<String>,
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run verification suites
    Oracle {
        /// identities | gradients | bound | thm1 | all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, d, q, mu, noise, seed, out } => generate(n, d, q, mu, noise, seed, &out),
        Command::Train { data, common } => train_cmd(&data, &common),
        Command::Evaluate { data, checkpoint, split, fixed_scores, common } => {
            evaluate_cmd(&data, checkpoint.as_deref(), &split, fixed_scores.as_deref(), &common)
        }
        Command::Sweep { data, lambdas, seeds, workers, common } => {
            sweep_cmd(&data, lambdas.as_deref(), &seeds, workers, &common)
        }
        Command::SelectGamma { data, gammas, lambdas, seeds, workers, common } => {
            select_gamma_cmd(&data, gammas.as_deref(), lambdas.as_deref(), &seeds, workers, &common)
        }
        Command::Oracle { suite, trials, seed, out } => oracle_cmd(&suite, trials, seed, &out),
    }
}

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn generate(n: usize, d: usize, q: usize, mu: f64, noise: f64, seed: u64, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let ds = data::generate_gerrymandered(n, d, q, mu, noise, seed)?;
    let path = out.join("dataset.csv");
    data::write_csv(&ds, &path)?;
    println!("n = {n}\nd = {d}\nq = {q}\nmu = {mu}\nnoise = {noise}\nseed = {seed}");
    println!("wrote {}", path.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    let q = sniff_q(path)?;
    data::load_csv(path, q)
}

/// Counts the `s_` columns of a dataset CSV header.
fn sniff_q(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().ok_or_else(|| Error::InvalidHeader("empty file".into()))?;
    Ok(header.split(',').filter(|c| c.trim().starts_with("s_")).count())
}

fn build_collection_for(
    ds: &Dataset,
    settings: &RunSettings,
    common: &CommonOpts,
) -> Result<SubsetCollection> {
    let custom = common.custom_sets()?;
    subsets::build_collection(ds, settings.train.gamma, &settings.train.orders, &custom)
}

fn echo_settings(settings: &RunSettings, out: &Path) -> Result<()> {
    let text = settings.resolved_text();
    print!("{text}");
    fs::write(out.join("config.txt"), &text).map_err(|e| Error::io(out.join("config.txt"), e))
}

fn train_cmd(data_path: &Path, common: &CommonOpts) -> Result<()> {
    let settings = common.settings()?;
    ensure_out(&common.out)?;
    let ds = load_data(data_path)?;
    let (tr, va, te) = data::split(&ds, &settings.split_spec()?)?;
    let coll = build_collection_for(&tr, &settings, common)?;
    println!("{}", subsets::collection_report(&coll));
    let outcome = train::train(&tr, &va, Some(&coll), &settings.train)?;
    let rows = train::evaluate_splits(&outcome, &tr, &va, &te, &coll, &settings.train)?;
    let ckpt = common.out.join("checkpoint.txt");
    model::save_checkpoint(&ckpt, &outcome.model, &outcome.adversary.0, &outcome.adversary.1, ds.d, ds.q)?;
    let metrics_path = common.out.join("metrics.csv");
    train::write_sweep_csv(&metrics_path, &rows)?;
    echo_settings(&settings, &common.out)?;
    println!(
        "best epoch {} of {}\nwrote {}\nwrote {}",
        outcome.best_epoch + 1,
        settings.train.epochs,
        ckpt.display(),
        metrics_path.display()
    );
    Ok(())
}

fn read_scores_file(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scores: Vec<f64> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|_| Error::MalformedRow {
                row: i,
                reason: format!("bad score `{l}`"),
            })
        })
        .collect::<Result<_>>()?;
    if scores.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} rows",
            scores.len(),
            n
        )));
    }
    Ok(scores)
}

fn evaluate_cmd(
    data_path: &Path,
    checkpoint: Option<&Path>,
    split: &str,
    fixed_scores: Option<&Path>,
    common: &CommonOpts,
) -> Result<()> {
    let settings = common.settings()?;
    ensure_out(&common.out)?;
    let ds = load_data(data_path)?;
    let gap_cfg = settings.train.gap_config();
    let grid = GridSpec::default();
    let mut rows: Vec<SweepRow> = Vec::new();

    if let Some(scores_path) = fixed_scores {
        let coll = build_collection_for(&ds, &settings, common)?;
        let scores = read_scores_file(scores_path, ds.n)?;
        let report = metrics::report(&scores, &ds, &coll, &gap_cfg, &grid)?;
        rows.push(SweepRow {
            method: settings.train.method,
            lambda: settings.train.lambda,
            gamma: settings.train.gamma,
            seed: settings.train.seed,
            split: "all".into(),
            report: Some(report),
        });
    } else {
        let ckpt_path = checkpoint.ok_or_else(|| {
            Error::InvalidArgument("evaluate needs --checkpoint or --fixed-scores".into())
        })?;
        let (model, _, _, d, q) = model::load_checkpoint(ckpt_path)?;
        if d != ds.d || q != ds.q {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint is for d={d}, q={q}; dataset has d={}, q={}",
                ds.d, ds.q
            )));
        }
        let (tr, va, te) = data::split(&ds, &settings.split_spec()?)?;
        let coll = build_collection_for(&tr, &settings, common)?;
        let selected: Vec<(&str, &Dataset)> = match split {
            "train" => vec![("train", &tr)],
            "valid" => vec![("valid", &va)],
            "test" => vec![("test", &te)],
            "all" => vec![("train", &tr), ("valid", &va), ("test", &te)],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown split `{other}` (train|valid|test|all)"
                )))
            }
        };
        for (name, part) in selected {
            let scores = model::predict_scores(&model, part)?;
            let report = metrics::report(&scores, part, &coll, &gap_cfg, &grid)?;
            rows.push(SweepRow {
                method: settings.train.method,
                lambda: settings.train.lambda,
                gamma: settings.train.gamma,
                seed: settings.train.seed,
                split: name.into(),
                report: Some(report),
            });
        }
    }
    let metrics_path = common.out.join("metrics.csv");
    train::write_sweep_csv(&metrics_path, &rows)?;
    echo_settings(&settings, &common.out)?;
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn parse_list_f64(raw: &str, what: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry `{f}`")))
        })
        .collect()
}

fn parse_list_u64(raw: &str, what: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|f| {
            f.trim()
                .parse::<u64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry `{f}`")))
        })
        .collect()
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

fn sweep_cmd(
    data_path: &Path,
    lambdas: Option<&str>,
    seeds: &str,
    workers: Option<usize>,
    common: &CommonOpts,
) -> Result<()> {
    let settings = common.settings()?;
    ensure_out(&common.out)?;
    let ds = load_data(data_path)?;
    let (tr, va, te) = data::split(&ds, &settings.split_spec()?)?;
    let coll = build_collection_for(&tr, &settings, common)?;
    let lambdas = match lambdas {
        Some(raw) => parse_list_f64(raw, "lambda")?,
        None => settings.train.method.default_grid(),
    };
    let seeds = parse_list_u64(seeds, "seed")?;
    let runs = with_pool(workers, || {
        train::sweep_lambda(&tr, &va, &te, &coll, &settings.train, &lambdas, &seeds)
    })??;

    let mut rows = Vec::new();
    for run in &runs {
        if let Ok(outcome) = &run.result {
            let name = format!(
                "checkpoint_{}_lambda{}_seed{}.txt",
                settings.train.method.label(),
                run.lambda,
                run.seed
            );
            model::save_checkpoint(
                &common.out.join(name),
                &outcome.model,
                &outcome.adversary.0,
                &outcome.adversary.1,
                ds.d,
                ds.q,
            )?;
        }
        rows.extend(run.rows.iter().cloned());
    }
    let sweep_path = common.out.join("sweep.csv");
    train::write_sweep_csv(&sweep_path, &rows)?;
    for split in ["valid", "test"] {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.split == split)
            .filter_map(|r| r.report.as_ref().map(|m| (m.sp, m.acc)))
            .collect();
        metrics::write_pareto_csv(&common.out.join(format!("pareto_{split}.csv")), &points)?;
    }
    echo_settings(&settings, &common.out)?;
    println!("{} runs\nwrote {}", runs.len(), sweep_path.display());
    Ok(())
}

fn select_gamma_cmd(
    data_path: &Path,
    gammas: Option<&str>,
    lambdas: Option<&str>,
    seeds: &str,
    workers: Option<usize>,
    common: &CommonOpts,
) -> Result<()> {
    let settings = common.settings()?;
    ensure_out(&common.out)?;
    let ds = load_data(data_path)?;
    let (tr, va, te) = data::split(&ds, &settings.split_spec()?)?;
    let gammas = match gammas {
        Some(raw) => parse_list_f64(raw, "gamma")?,
        None => train::DEFAULT_GAMMA_GRID.to_vec(),
    };
    let lambdas = match lambdas {
        Some(raw) => parse_list_f64(raw, "lambda")?,
        None => settings.train.method.default_grid(),
    };
    let seeds = parse_list_u64(seeds, "seed")?;

    let mut fronts: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for &gamma in &gammas {
        let mut cfg = settings.train.clone();
        cfg.gamma = gamma;
        let custom = common.custom_sets()?;
        let coll = subsets::build_collection(&tr, gamma, &cfg.orders, &custom)?;
        let runs = with_pool(workers, || {
            train::sweep_lambda(&tr, &va, &te, &coll, &cfg, &lambdas, &seeds)
        })??;
        let points: Vec<(f64, f64)> = runs
            .iter()
            .flat_map(|r| r.rows.iter())
            .filter(|r| r.split == "valid")
            .filter_map(|r| r.report.as_ref().map(|m| (m.sp, m.acc)))
            .collect();
        fronts.push((gamma, points));
    }
    let chosen = train::select_gamma(&fronts)?;
    let mut text = String::from("gamma,area\n");
    for (gamma, points) in &fronts {
        text.push_str(&format!("{gamma},{}\n", train::pareto_area(points)));
    }
    let areas_path = common.out.join("gamma_areas.csv");
    fs::write(&areas_path, text).map_err(|e| Error::io(&areas_path, e))?;
    echo_settings(&settings, &common.out)?;
    println!("selected gamma = {chosen}\nwrote {}", areas_path.display());
    Ok(())
}

fn oracle_cmd(suite: &str, trials: usize, seed: u64, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let mut reports: Vec<OracleReport> = Vec::new();
    let run_identities = suite == "identities" || suite == "all";
    let run_gradients = suite == "gradients" || suite == "all";
    let run_bound = suite == "bound" || suite == "all";
    let run_thm1 = suite == "thm1" || suite == "all";
    if !(run_identities || run_gradients || run_bound || run_thm1) {
        return Err(Error::InvalidArgument(format!(
            "unknown suite `{suite}` (identities|gradients|bound|thm1|all)"
        )));
    }
    if run_identities {
        reports.push(oracle::verify_identity_suite(trials, seed));
    }
    if run_gradients {
        let fd_trials = trials.min(100).max(1);
        for (kind, offset) in [
            (model::LossKind::Classification, 0u64),
            (model::LossKind::Dr2, 1),
            (model::LossKind::zdr(), 2),
            (model::LossKind::combined(0.7), 3),
        ] {
            reports.push(oracle::finite_diff_suite(kind, fd_trials, seed + offset, 1e-5)?);
        }
    }
    if run_bound {
        reports.extend(oracle::bound_suite(seed)?);
    }
    if run_thm1 {
        reports.push(oracle::thm1_sanity(&SimConfig { seed, ..SimConfig::default() }));
    }
    for report in &reports {
        println!("{}", report.line());
    }
    let path = out.join("oracle_report.csv");
    oracle::write_oracle_csv(&path, &reports)?;
    println!("wrote {}", path.display());
    if let Some(failed) = reports.iter().find(|r| !r.passed) {
        return Err(Error::OracleFailed(failed.name.clone()));
    }
    Ok(())
}
