//! Training loops: the doubly-regressing adversarial trainer, the marginal
//! regularization and worst-group baselines, the unconstrained trainer, the
//! multiplier sweep, and gamma selection by Pareto-front area.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{subgroup_keys, Dataset};
use crate::fairness::{self, DrGapConfig, GridSpec, ZDR_CLAMP_EPS};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    self,
    backprop_from_score_grad, backward, init_params, predict_scores, Dims,
    Discriminator, LossKind, PredictionModel, WeightVector,
};
use crate::subsets::{membership, MembershipMatrix, SubsetCollection};
use crate::{Error, Result};

/// Multiplier grid for the adversarial trainer.
pub const DEFAULT_LAMBDA_GRID: [f64; 17] = [
    0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0,
];

/// Multiplier grid for the marginal-regularization baseline.
pub const DEFAULT_REG_GRID: [f64; 17] = [
    0.001, 0.002, 0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0,
    100.0,
];

/// Multiplier grid for the worst-group baseline.
pub const DEFAULT_GF_GRID: [f64; 10] =
    [0.1, 0.5, 1.0, 5.0, 20.0, 50.0, 200.0, 500.0, 1000.0, 5000.0];

/// Candidate admission fractions for gamma selection.
pub const DEFAULT_GAMMA_GRID: [f64; 7] = [0.001, 0.005, 0.01, 0.05, 0.10, 0.20, 0.30];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Draf,
    Reg,
    Gf,
    None,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Draf => "draf",
            Method::Reg => "reg",
            Method::Gf => "gf",
            Method::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "draf" => Ok(Method::Draf),
            "reg" => Ok(Method::Reg),
            "gf" => Ok(Method::Gf),
            "none" => Ok(Method::None),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }

    /// Paper-style multiplier grid for this method.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Method::Draf => DEFAULT_LAMBDA_GRID.to_vec(),
            Method::Reg => DEFAULT_REG_GRID.to_vec(),
            Method::Gf => DEFAULT_GF_GRID.to_vec(),
            Method::None => vec![0.0],
        }
    }
}

/// All knobs of one training run. `lambda` is the fairness multiplier for
/// the adversarial trainer and is reused as the penalty constant of the
/// baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub lr_cls: f64,
    pub lr_g: f64,
    pub lr_v: f64,
    pub epochs: usize,
    /// None = full batch; Some(b) batches the classification term only.
    pub batch: Option<usize>,
    pub hidden: usize,
    pub gamma: f64,
    pub orders: Vec<usize>,
    pub seed: u64,
    pub gf_temperature: f64,
    pub clamp_eps: f64,
    /// Adversary ascent steps per epoch.
    pub adversary_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::None,
            lambda: 0.0,
            lr_cls: 0.01,
            lr_g: 0.05,
            lr_v: 0.05,
            epochs: 200,
            batch: None,
            hidden: 64,
            gamma: 0.01,
            orders: vec![1, 2],
            seed: 0,
            gf_temperature: 20.0,
            clamp_eps: ZDR_CLAMP_EPS,
            adversary_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_cls <= 0.0 || self.lr_g <= 0.0 || self.lr_v <= 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        if self.gf_temperature <= 0.0 {
            return Err(Error::InvalidArgument("gf_temperature must be positive".into()));
        }
        if self.adversary_steps == 0 {
            return Err(Error::InvalidArgument("adversary_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Ascent settings used when measuring the DR gap of a trained model.
    pub fn gap_config(&self) -> DrGapConfig {
        DrGapConfig {
            lr_g: self.lr_g,
            lr_v: self.lr_v,
            seed: self.seed,
            clamp_eps: self.clamp_eps,
            ..DrGapConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub ce: f64,
    /// z-DR^2 for the adversarial trainer, the penalty value for the
    /// baselines, zero for unconstrained training.
    pub fairness: f64,
    pub valid_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub model: PredictionModel,
    pub adversary: (Discriminator, WeightVector),
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Mean cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12].
pub fn cross_entropy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::DimensionMismatch("scores and labels must have equal length".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// Sum over attributes of |overall mean score - mean score where the
/// attribute is 1|. Attributes with an empty or full positive side are
/// skipped; their indices are returned.
pub fn marginal_disparity_penalty(scores: &[f64], ds: &Dataset) -> (f64, Vec<f64>, Vec<usize>) {
    let n = ds.n as f64;
    let overall: f64 = scores.iter().sum::<f64>() / n;
    let mut penalty = 0.0;
    let mut dscore = vec![0.0; ds.n];
    let mut skipped = Vec::new();
    for l in 0..ds.q {
        let ones: Vec<usize> = (0..ds.n).filter(|&i| ds.sensitive_row(i)[l] == 1).collect();
        if ones.is_empty() || ones.len() == ds.n {
            skipped.push(l);
            continue;
        }
        let n_l = ones.len() as f64;
        let side: f64 = ones.iter().map(|&i| scores[i]).sum::<f64>() / n_l;
        let diff = overall - side;
        penalty += diff.abs();
        let sign = if diff == 0.0 { 0.0 } else { diff.signum() };
        if sign != 0.0 {
            for item in dscore.iter_mut() {
                *item += sign / n;
            }
            for &i in &ones {
                dscore[i] -= sign / n_l;
            }
        }
    }
    (penalty, dscore, skipped)
}

fn softmax_weighted(w: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let peak = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = w.iter().map(|&x| ((x - peak) * temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let value = weights.iter().zip(w).map(|(s, x)| s * x).sum();
    (value, weights)
}

/// Softmax-smoothed worst-group disparity over score means, and its
/// per-score gradient. Needs at least two nonempty subgroups.
pub fn worst_group_penalty(
    scores: &[f64],
    ds: &Dataset,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    let keys = subgroup_keys(ds);
    let mut index = std::collections::BTreeMap::new();
    for key in &keys {
        let next = index.len();
        index.entry(key.0).or_insert(next);
    }
    let k = index.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "worst-group penalty needs at least 2 nonempty subgroups".into(),
        ));
    }
    let slot: Vec<usize> = keys.iter().map(|key| index[&key.0]).collect();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &p) in scores.iter().enumerate() {
        sums[slot[i]] += p;
        counts[slot[i]] += 1;
    }
    let n = ds.n as f64;
    let overall: f64 = scores.iter().sum::<f64>() / n;
    let mut w = vec![0.0; k];
    let mut sign = vec![0.0; k];
    for t in 0..k {
        let mean_t = sums[t] / counts[t] as f64;
        let diff = mean_t - overall;
        w[t] = counts[t] as f64 / n * diff.abs();
        sign[t] = if diff == 0.0 { 0.0 } else { diff.signum() };
    }
    let (penalty, soft) = softmax_weighted(&w, temperature);
    // d penalty / d w_t for a softmax-weighted sum
    let mut coef = vec![0.0; k];
    let mut coef_total = 0.0;
    for t in 0..k {
        let dpdw = soft[t] * (1.0 + temperature * (w[t] - penalty));
        coef[t] = dpdw * counts[t] as f64 / n * sign[t];
        coef_total += coef[t];
    }
    let mut dscore = vec![0.0; ds.n];
    for i in 0..ds.n {
        let t = slot[i];
        dscore[i] = coef[t] / counts[t] as f64 - coef_total / n;
    }
    Ok((penalty, dscore))
}

enum FairTerm<'a> {
    None,
    Adversarial { c: &'a MembershipMatrix },
    Marginal,
    WorstGroup,
}

fn run_loop(
    ds_train: &Dataset,
    ds_valid: &Dataset,
    term: FairTerm<'_>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    let m = match &term {
        FairTerm::Adversarial { c } => c.m,
        _ => 1,
    };
    let dims = Dims { d: ds_train.d, q: ds_train.q, h: cfg.hidden, m };
    let (mut model, mut disc, mut v) = init_params(dims, cfg.seed)?;
    let mut adam = model::AdamState::new(model.param_count());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let placeholder = MembershipMatrix::from_columns(vec![alternating(ds_train.n)])?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, PredictionModel, Discriminator, WeightVector)> = None;
    for epoch in 0..cfg.epochs {
        let scores = predict_scores(&model, ds_train)?;
        let ce = cross_entropy(&scores, ds_train.labels())?;

        // adversary / penalty evaluation at the epoch-start scores
        let mut fairness_value = 0.0;
        let mut penalty_grad: Option<Vec<f64>> = None;
        match &term {
            FairTerm::None => {}
            FairTerm::Adversarial { c } => {
                // Inner maximization over vertex weight vectors: scan every
                // subset with a bank of discriminators, then refine the
                // discriminator by ascent at the tracked and probed vertices
                // and keep the best witness. Interior sphere ascent is not
                // used here: along near-null variance directions of the
                // membership columns the DR^2 ratio diverges and its z-clamp
                // then zeroes every gradient, which stalls the game.
                let (_, probe_disc, probe_v) = fairness::vertex_probe(&scores, c, cfg.clamp_eps);
                let mut best: Option<(f64, Discriminator, WeightVector)> = None;
                for (phi0, v0) in [(disc, v.clone()), (probe_disc, probe_v)] {
                    let run = fairness::phi_ascent_at_vertex(
                        &scores,
                        c,
                        phi0,
                        &v0,
                        cfg.adversary_steps,
                        cfg.lr_g,
                        cfg.clamp_eps,
                    );
                    if best.as_ref().map_or(true, |b| run.0 > b.0) {
                        best = Some((run.0, run.1, v0));
                    }
                }
                let (z_now, best_disc, best_v) = best.expect("candidates nonempty");
                disc = best_disc;
                v = best_v;
                fairness_value = z_now;
            }
            FairTerm::Marginal => {
                let (value, dscore, _skipped) = marginal_disparity_penalty(&scores, ds_train);
                fairness_value = value;
                penalty_grad = Some(dscore);
            }
            FairTerm::WorstGroup => {
                let (value, dscore) = worst_group_penalty(&scores, ds_train, cfg.gf_temperature)?;
                fairness_value = value;
                penalty_grad = Some(dscore);
            }
        }

        // classifier update
        match cfg.batch {
            None => {
                let grad_ce = match &term {
                    FairTerm::Adversarial { c } => {
                        backward(&model, &disc, &v, ds_train, c, LossKind::Classification)?
                    }
                    _ => backward(
                        &model,
                        &disc,
                        &v,
                        ds_train,
                        &placeholder,
                        LossKind::Classification,
                    )?,
                };
                let fair_theta = fair_theta_grad(
                    &term, &model, &disc, &v, ds_train, cfg, penalty_grad.as_deref(),
                )?;
                let mut grad = grad_ce.d_theta;
                if let Some(fair) = fair_theta {
                    for (g, f) in grad.iter_mut().zip(&fair) {
                        *g += cfg.lambda * f;
                    }
                }
                adam.step(&mut model, &grad, cfg.lr_cls);
            }
            Some(batch) => {
                let batch = batch.max(1);
                let mut order: Vec<usize> = (0..ds_train.n).collect();
                order.shuffle(&mut batch_rng);
                for chunk in order.chunks(batch) {
                    let sub = ds_train.select(chunk)?;
                    let grad = backward(
                        &model,
                        &disc,
                        &v,
                        &sub,
                        &placeholder,
                        LossKind::Classification,
                    )?;
                    adam.step(&mut model, &grad.d_theta, cfg.lr_cls);
                }
                // the fairness term stays full-batch, applied once per epoch
                let fair_theta = fair_theta_grad(
                    &term, &model, &disc, &v, ds_train, cfg, penalty_grad.as_deref(),
                )?;
                if let Some(fair) = fair_theta {
                    let grad: Vec<f64> = fair.iter().map(|f| cfg.lambda * f).collect();
                    adam.step(&mut model, &grad, cfg.lr_cls);
                }
            }
        }

        if !model.is_finite()
            || !fairness_value.is_finite()
            || !ce.is_finite()
            || !disc.scale.is_finite()
            || !disc.offset.is_finite()
        {
            return Err(Error::NonFiniteTraining { epoch });
        }

        let valid_scores = predict_scores(&model, ds_valid)?;
        let valid_acc = metrics::accuracy(&valid_scores, ds_valid.labels())?;
        history.push(EpochStats { ce, fairness: fairness_value, valid_acc });
        if best.as_ref().map_or(true, |b| valid_acc > b.0) {
            best = Some((valid_acc, epoch, model.clone(), disc, v.clone()));
        }
    }
    let (_, best_epoch, best_model, best_disc, best_v) = best.expect("epochs >= 1");
    Ok(TrainResult {
        model: best_model,
        adversary: (best_disc, best_v),
        history,
        best_epoch,
    })
}

fn alternating(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
}


fn fair_theta_grad(
    term: &FairTerm<'_>,
    model: &PredictionModel,
    disc: &Discriminator,
    v: &WeightVector,
    ds_train: &Dataset,
    cfg: &TrainConfig,
    penalty_grad: Option<&[f64]>,
) -> Result<Option<Vec<f64>>> {
    if cfg.lambda == 0.0 {
        return Ok(None);
    }
    match term {
        FairTerm::None => Ok(None),
        FairTerm::Adversarial { c } => {
            let grad = backward(
                model,
                disc,
                v,
                ds_train,
                c,
                LossKind::ZDr { clamp_eps: cfg.clamp_eps },
            )?;
            Ok(Some(grad.d_theta))
        }
        FairTerm::Marginal | FairTerm::WorstGroup => {
            let dscore = penalty_grad.expect("penalty gradient computed above");
            Ok(Some(backprop_from_score_grad(model, ds_train, dscore)?))
        }
    }
}

/// Alternating adversarial training: per epoch the discriminator and weight
/// vector ascend the z-DR^2 surrogate, then the classifier descends
/// cross-entropy plus lambda times the surrogate.
pub fn train_draf(
    ds_train: &Dataset,
    ds_valid: &Dataset,
    coll: &SubsetCollection,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let c = membership(ds_train, coll)?;
    run_loop(ds_train, ds_valid, FairTerm::Adversarial { c: &c }, cfg)
}

/// Gradient descent on cross-entropy plus lambda times the summed marginal
/// score disparities.
pub fn train_reg(ds_train: &Dataset, ds_valid: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    run_loop(ds_train, ds_valid, FairTerm::Marginal, cfg)
}

/// Gradient descent on cross-entropy plus lambda times the softmax-smoothed
/// worst-group score disparity.
pub fn train_gf(ds_train: &Dataset, ds_valid: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    run_loop(ds_train, ds_valid, FairTerm::WorstGroup, cfg)
}

/// Plain cross-entropy training.
pub fn train_unconstrained(
    ds_train: &Dataset,
    ds_valid: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    run_loop(ds_train, ds_valid, FairTerm::None, cfg)
}

/// Dispatch on the configured method. The collection is only required for
/// the adversarial trainer.
pub fn train(
    ds_train: &Dataset,
    ds_valid: &Dataset,
    coll: Option<&SubsetCollection>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    match cfg.method {
        Method::Draf => {
            let coll = coll.ok_or_else(|| {
                Error::InvalidArgument("adversarial training needs a subset collection".into())
            })?;
            train_draf(ds_train, ds_valid, coll, cfg)
        }
        Method::Reg => train_reg(ds_train, ds_valid, cfg),
        Method::Gf => train_gf(ds_train, ds_valid, cfg),
        Method::None => train_unconstrained(ds_train, ds_valid, cfg),
    }
}

/// One line of the sweep CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub split: String,
    pub report: Option<MetricsReport>,
}

/// One completed (or failed) sweep run with its per-split rows.
#[derive(Debug)]
pub struct SweepRun {
    pub lambda: f64,
    pub seed: u64,
    pub result: Result<TrainResult>,
    pub rows: Vec<SweepRow>,
}

/// Trains one model per (lambda, seed) pair and evaluates it on the three
/// splits. Failed runs are flagged with a metric-less row and the sweep
/// continues. Row order is deterministic: lambda-major, then seed, then
/// train/valid/test.
pub fn sweep_lambda(
    ds_train: &Dataset,
    ds_valid: &Dataset,
    ds_test: &Dataset,
    coll: &SubsetCollection,
    base_cfg: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRun>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs nonempty lambda and seed grids".into()));
    }
    let jobs: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(lambda, seed)| {
            let mut cfg = base_cfg.clone();
            cfg.lambda = lambda;
            cfg.seed = seed;
            let result = train(ds_train, ds_valid, Some(coll), &cfg);
            let rows = match &result {
                Ok(outcome) => {
                    match evaluate_splits(outcome, ds_train, ds_valid, ds_test, coll, &cfg) {
                        Ok(rows) => rows,
                        Err(_) => vec![failed_row(&cfg)],
                    }
                }
                Err(_) => vec![failed_row(&cfg)],
            };
            SweepRun { lambda, seed, result, rows }
        })
        .collect();
    Ok(runs)
}

fn failed_row(cfg: &TrainConfig) -> SweepRow {
    SweepRow {
        method: cfg.method,
        lambda: cfg.lambda,
        gamma: cfg.gamma,
        seed: cfg.seed,
        split: "failed".into(),
        report: None,
    }
}

/// Evaluates a trained model on the three splits with the run's settings.
pub fn evaluate_splits(
    outcome: &TrainResult,
    ds_train: &Dataset,
    ds_valid: &Dataset,
    ds_test: &Dataset,
    coll: &SubsetCollection,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let gap_cfg = cfg.gap_config();
    let grid = GridSpec::default();
    let mut rows = Vec::with_capacity(3);
    for (name, ds) in [("train", ds_train), ("valid", ds_valid), ("test", ds_test)] {
        let scores = predict_scores(&outcome.model, ds)?;
        let report = metrics::report(&scores, ds, coll, &gap_cfg, &grid)?;
        rows.push(SweepRow {
            method: cfg.method,
            lambda: cfg.lambda,
            gamma: cfg.gamma,
            seed: cfg.seed,
            split: name.into(),
            report: Some(report),
        });
    }
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "method,lambda,gamma,seed,split,acc,sp,mp1,mp2,wmp,zdr,supipm";

/// Writes sweep rows in the fixed schema. Failed rows leave the metric
/// fields empty.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{SWEEP_HEADER}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        let metrics_part = match &row.report {
            Some(r) => {
                let mp1 = r.mp.get(&1).map(|v| format!("{v}")).unwrap_or_default();
                let mp2 = r.mp.get(&2).map(|v| format!("{v}")).unwrap_or_default();
                format!("{},{},{},{},{},{}", r.acc, r.sp, mp1, mp2, r.wmp, r.zdr)
                    + &format!(",{}", r.supipm)
            }
            None => ",,,,,,".into(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.method.label(),
            row.lambda,
            row.gamma,
            row.seed,
            row.split,
            metrics_part
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Reads a sweep CSV back into rows; empty metric fields become None.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != SWEEP_HEADER {
                return Err(Error::InvalidHeader(format!("unexpected sweep header `{line}`")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::MalformedRow { row: i, reason: "expected 12 fields".into() });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::MalformedRow { row: i, reason: format!("bad {what}") })
        };
        let method = Method::parse(fields[0])?;
        let lambda = parse_f(fields[1], "lambda")?;
        let gamma = parse_f(fields[2], "gamma")?;
        let seed: u64 = fields[3]
            .parse()
            .map_err(|_| Error::MalformedRow { row: i, reason: "bad seed".into() })?;
        let split = fields[4].to_string();
        let report = if fields[5].is_empty() {
            None
        } else {
            let mut mp = std::collections::BTreeMap::new();
            if !fields[7].is_empty() {
                mp.insert(1, parse_f(fields[7], "mp1")?);
            }
            if !fields[8].is_empty() {
                mp.insert(2, parse_f(fields[8], "mp2")?);
            }
            Some(MetricsReport {
                acc: parse_f(fields[5], "acc")?,
                sp: parse_f(fields[6], "sp")?,
                mp,
                wmp: parse_f(fields[9], "wmp")?,
                zdr: parse_f(fields[10], "zdr")?,
                supipm: parse_f(fields[11], "supipm")?,
                n_eval: 0,
            })
        };
        rows.push(SweepRow { method, lambda, gamma, seed, split, report });
    }
    Ok(rows)
}

/// Normalized area under the accuracy-over-fairness Pareto front: extract
/// nondominated points, sort by fairness, trapezoid-integrate accuracy and
/// divide by the fairness range. Fewer than two distinct fairness values
/// give area zero.
pub fn pareto_area(points: &[(f64, f64)]) -> f64 {
    let front = metrics::pareto_front(points);
    if front.len() < 2 {
        return 0.0;
    }
    let lo = front.first().expect("nonempty").0;
    let hi = front.last().expect("nonempty").0;
    if hi <= lo {
        return 0.0;
    }
    let mut area = 0.0;
    for pair in front.windows(2) {
        area += (pair[0].1 + pair[1].1) / 2.0 * (pair[1].0 - pair[0].0);
    }
    area / (hi - lo)
}

/// Picks the admission fraction whose validation Pareto front has the
/// largest normalized area; ties go to the smaller gamma.
pub fn select_gamma(fronts: &[(f64, Vec<(f64, f64)>)]) -> Result<f64> {
    if fronts.is_empty() {
        return Err(Error::InvalidArgument("select_gamma needs at least one front".into()));
    }
    for (gamma, points) in fronts {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "gamma {gamma} has fewer than 2 sweep points"
            )));
        }
    }
    let mut best: Option<(f64, f64)> = None; // (gamma, area)
    for (gamma, points) in fronts {
        let area = pareto_area(points);
        let better = match best {
            None => true,
            Some((bg, ba)) => area > ba || (area == ba && *gamma < bg),
        };
        if better {
            best = Some((*gamma, area));
        }
    }
    Ok(best.expect("nonempty").0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_gerrymandered, Dataset};
    use crate::subsets::build_collection;

    #[test]
    fn cross_entropy_hand_values() {
        let ce = cross_entropy(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-15);
        let ce2 = cross_entropy(&[0.9, 0.1], &[1, 0]).unwrap();
        assert!((ce2 + 0.9f64.ln()).abs() < 1e-15);
        let ce3 = cross_entropy(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(ce3 > 0.0 && ce3 < 1e-11, "clamped loss was {ce3}");
    }

    #[test]
    fn marginal_penalty_hand_values() {
        let ds = Dataset::new(vec![0.0, 0.0], vec![1, 0], vec![1, 0], 1, 1).unwrap();
        let (p, dscore, skipped) = marginal_disparity_penalty(&[0.8, 0.2], &ds);
        assert!((p - 0.3).abs() < 1e-15);
        assert!(skipped.is_empty());
        // numerical gradient check of the penalty alone
        let eps = 1e-7;
        for i in 0..2 {
            let mut plus = [0.8, 0.2];
            plus[i] += eps;
            let mut minus = [0.8, 0.2];
            minus[i] -= eps;
            let fd = (marginal_disparity_penalty(&plus, &ds).0
                - marginal_disparity_penalty(&minus, &ds).0)
                / (2.0 * eps);
            assert!((fd - dscore[i]).abs() < 1e-6);
        }
        let (zero, _, _) = marginal_disparity_penalty(&[0.4, 0.4], &ds);
        assert!(zero.abs() < 1e-15);
    }

    #[test]
    fn marginal_penalty_skips_one_sided_attributes() {
        let ds = Dataset::new(vec![0.0; 3], vec![1, 1, 1, 0, 1, 1], vec![1, 0, 1], 1, 2).unwrap();
        let (_, _, skipped) = marginal_disparity_penalty(&[0.9, 0.1, 0.5], &ds);
        assert_eq!(skipped, vec![0]);
    }

    #[test]
    fn worst_group_penalty_symmetric_fixture() {
        let ds = Dataset::new(vec![0.0; 4], vec![0, 0, 1, 1], vec![1, 1, 0, 0], 1, 1).unwrap();
        let (p, _) = worst_group_penalty(&[0.9, 0.9, 0.1, 0.1], &ds, 20.0).unwrap();
        assert!((p - 0.2).abs() < 1e-12, "penalty was {p}");
        let (zero, _) = worst_group_penalty(&[0.5; 4], &ds, 20.0).unwrap();
        assert!(zero.abs() < 1e-15);
    }

    #[test]
    fn worst_group_penalty_needs_two_groups() {
        let ds = Dataset::new(vec![0.0; 2], vec![1, 1], vec![1, 0], 1, 1).unwrap();
        assert!(worst_group_penalty(&[0.5, 0.5], &ds, 20.0).is_err());
    }

    #[test]
    fn worst_group_gradient_matches_finite_differences() {
        let ds = Dataset::new(
            vec![0.0; 6],
            vec![0, 0, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1],
            vec![1, 0, 1, 0, 1, 0],
            1,
            2,
        )
        .unwrap();
        let scores = [0.81, 0.33, 0.57, 0.12, 0.94, 0.46];
        let (_, dscore) = worst_group_penalty(&scores, &ds, 7.0).unwrap();
        let eps = 1e-7;
        for i in 0..scores.len() {
            let mut plus = scores;
            plus[i] += eps;
            let mut minus = scores;
            minus[i] -= eps;
            let fd = (worst_group_penalty(&plus, &ds, 7.0).unwrap().0
                - worst_group_penalty(&minus, &ds, 7.0).unwrap().0)
                / (2.0 * eps);
            assert!((fd - dscore[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", dscore[i]);
        }
    }

    #[test]
    fn softmax_limit_approaches_max() {
        let (value, _) = softmax_weighted(&[0.3, 0.1], 1000.0);
        assert!((value - 0.3).abs() < 1e-3);
        let (uniformish, _) = softmax_weighted(&[0.2, 0.2], 1000.0);
        assert!((uniformish - 0.2).abs() < 1e-15);
    }

    fn small_setup() -> (Dataset, Dataset, SubsetCollection) {
        let ds = generate_gerrymandered(240, 3, 2, 2.0, 1.0, 7).unwrap();
        let spec = crate::data::SplitSpec::default();
        let (tr, va, _) = crate::data::split(&ds, &spec).unwrap();
        let coll = build_collection(&tr, 0.05, &[1], &[]).unwrap();
        (tr, va, coll)
    }

    #[test]
    fn lambda_zero_trajectories_coincide() {
        let (tr, va, coll) = small_setup();
        let mut cfg = TrainConfig { epochs: 12, hidden: 8, lambda: 0.0, ..TrainConfig::default() };
        cfg.method = Method::Draf;
        let draf = train_draf(&tr, &va, &coll, &cfg).unwrap();
        cfg.method = Method::Reg;
        let reg = train_reg(&tr, &va, &cfg).unwrap();
        cfg.method = Method::Gf;
        let gf = train_gf(&tr, &va, &cfg).unwrap();
        cfg.method = Method::None;
        let plain = train_unconstrained(&tr, &va, &cfg).unwrap();
        assert_eq!(plain.model, draf.model);
        assert_eq!(plain.model, reg.model);
        assert_eq!(plain.model, gf.model);
        for other in [&draf, &reg, &gf] {
            for (a, b) in plain.history.iter().zip(&other.history) {
                assert_eq!(a.ce.to_bits(), b.ce.to_bits());
                assert_eq!(a.valid_acc.to_bits(), b.valid_acc.to_bits());
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va, coll) = small_setup();
        let cfg = TrainConfig {
            epochs: 10,
            hidden: 8,
            lambda: 1.0,
            method: Method::Draf,
            ..TrainConfig::default()
        };
        let a = train_draf(&tr, &va, &coll, &cfg).unwrap();
        let b = train_draf(&tr, &va, &coll, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn best_epoch_tracks_validation_accuracy() {
        let (tr, va, coll) = small_setup();
        let cfg = TrainConfig {
            epochs: 15,
            hidden: 8,
            lambda: 0.5,
            method: Method::Draf,
            ..TrainConfig::default()
        };
        let out = train_draf(&tr, &va, &coll, &cfg).unwrap();
        let best = out.history.iter().map(|e| e.valid_acc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.history[out.best_epoch].valid_acc, best);
        let scores = predict_scores(&out.model, &va).unwrap();
        let acc = metrics::accuracy(&scores, va.labels()).unwrap();
        assert_eq!(acc, best);
    }

    #[test]
    fn minibatch_mode_runs_and_is_deterministic() {
        let (tr, va, coll) = small_setup();
        let cfg = TrainConfig {
            epochs: 6,
            hidden: 8,
            lambda: 0.5,
            batch: Some(32),
            method: Method::Draf,
            ..TrainConfig::default()
        };
        let a = train_draf(&tr, &va, &coll, &cfg).unwrap();
        let b = train_draf(&tr, &va, &coll, &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn sweep_shapes_and_order() {
        let (tr, va, coll) = small_setup();
        let (_, _, te) = crate::data::split(
            &generate_gerrymandered(240, 3, 2, 2.0, 1.0, 7).unwrap(),
            &crate::data::SplitSpec::default(),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            hidden: 6,
            method: Method::Draf,
            ..TrainConfig::default()
        };
        let runs = sweep_lambda(&tr, &va, &te, &coll, &cfg, &[0.0, 1.0], &[0, 1]).unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(
            runs.iter().map(|r| (r.lambda, r.seed)).collect::<Vec<_>>(),
            vec![(0.0, 0), (0.0, 1), (1.0, 0), (1.0, 1)]
        );
        for run in &runs {
            assert_eq!(run.rows.len(), 3);
            assert_eq!(run.rows[0].split, "train");
            assert_eq!(run.rows[2].split, "test");
        }
    }

    #[test]
    fn sweep_csv_round_trip() {
        let (tr, va, coll) = small_setup();
        let cfg = TrainConfig {
            epochs: 3,
            hidden: 6,
            method: Method::Draf,
            ..TrainConfig::default()
        };
        let runs = sweep_lambda(&tr, &va, &va, &coll, &cfg, &[0.5], &[3]).unwrap();
        let rows: Vec<SweepRow> = runs.into_iter().flat_map(|r| r.rows).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let back = read_sweep_csv(&path).unwrap();
        let path2 = dir.path().join("sweep2.csv");
        write_sweep_csv(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pareto_area_fixture() {
        let area = pareto_area(&[(0.0, 0.6), (0.1, 0.8), (0.2, 0.9)]);
        assert!((area - 0.775).abs() < 1e-12, "area was {area}");
        assert_eq!(pareto_area(&[(0.1, 0.9)]), 0.0);
    }

    #[test]
    fn gamma_selection_rules() {
        let a = (0.01, vec![(0.1, 0.8), (0.2, 0.9)]);
        let b = (0.1, vec![(0.1, 0.7), (0.2, 0.8)]);
        assert_eq!(select_gamma(&[a.clone(), b]).unwrap(), 0.01);
        let tie1 = (0.05, vec![(0.1, 0.8), (0.2, 0.9)]);
        let tie2 = (0.01, vec![(0.1, 0.8), (0.2, 0.9)]);
        assert_eq!(select_gamma(&[tie1, tie2]).unwrap(), 0.01);
        assert!(select_gamma(&[(0.01, vec![(0.1, 0.8)])]).is_err());
    }
}
