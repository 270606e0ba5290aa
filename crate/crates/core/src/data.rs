//! Dataset representation, CSV ingestion, splitting, subgroup indexing, and
//! the gerrymandered synthetic generator.
//!
//! Rows carry a real feature vector, `q` binary sensitive attributes, and a
//! binary label. Subgroups are indexed by packing the sensitive bits into an
//! integer (bit `j` = attribute `j`), which caps `q` at 30.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub const MAX_SENSITIVE: usize = 30;

/// One subgroup: the set of rows sharing an exact sensitive-attribute vector,
/// encoded as a bitmask with bit `j` = attribute `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubgroupKey(pub u32);

impl SubgroupKey {
    pub fn bits(self) -> u32 {
        self.0
    }

    /// Value of attribute `j` in this key.
    pub fn attr(self, j: usize) -> u8 {
        ((self.0 >> j) & 1) as u8
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// In-memory dataset: `n x d` features, `n x q` binary sensitive attributes,
/// length-`n` binary labels. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    sensitive: Vec<u8>,
    labels: Vec<u8>,
    pub n: usize,
    pub d: usize,
    pub q: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        sensitive: Vec<u8>,
        labels: Vec<u8>,
        d: usize,
        q: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument("dataset needs n >= 1 and d >= 1".into()));
        }
        if q == 0 || q > MAX_SENSITIVE {
            return Err(Error::InvalidArgument(format!(
                "q must be in 1..={MAX_SENSITIVE}, got {q}"
            )));
        }
        if features.len() != n * d || sensitive.len() != n * q {
            return Err(Error::DimensionMismatch(format!(
                "expected {}x{} features and {}x{} sensitive entries",
                n, d, n, q
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        if sensitive.iter().any(|&b| b > 1) || labels.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument(
                "sensitive attributes and labels must be 0 or 1".into(),
            ));
        }
        Ok(Dataset {
            features,
            sensitive,
            labels,
            n,
            d,
            q,
        })
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn sensitive_row(&self, i: usize) -> &[u8] {
        &self.sensitive[i * self.q..(i + 1) * self.q]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Model input width: features concatenated with sensitive bits.
    pub fn input_dim(&self) -> usize {
        self.d + self.q
    }

    /// Concatenated (x_i, s_i) input written into `buf`.
    pub fn fill_input(&self, i: usize, buf: &mut [f64]) {
        buf[..self.d].copy_from_slice(self.feature_row(i));
        for (j, &b) in self.sensitive_row(i).iter().enumerate() {
            buf[self.d + j] = b as f64;
        }
    }

    /// New dataset with the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(rows.len() * self.d);
        let mut sensitive = Vec::with_capacity(rows.len() * self.q);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.feature_row(i));
            sensitive.extend_from_slice(self.sensitive_row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, sensitive, labels, self.d, self.q)
    }
}

/// Subgroup key of row `i`: bits = sum_j s_ij * 2^j.
pub fn subgroup_key(ds: &Dataset, i: usize) -> Result<SubgroupKey> {
    if i >= ds.n {
        return Err(Error::InvalidArgument(format!(
            "row index {i} out of range for n={}",
            ds.n
        )));
    }
    let mut bits = 0u32;
    for (j, &b) in ds.sensitive_row(i).iter().enumerate() {
        bits |= (b as u32) << j;
    }
    Ok(SubgroupKey(bits))
}

/// Subgroup keys for all rows.
pub fn subgroup_keys(ds: &Dataset) -> Vec<SubgroupKey> {
    (0..ds.n).map(|i| subgroup_key(ds, i).expect("index in range")).collect()
}

/// Counts per nonempty subgroup; counts sum to `n`.
pub fn subgroup_counts(ds: &Dataset) -> BTreeMap<SubgroupKey, usize> {
    let mut counts = BTreeMap::new();
    for key in subgroup_keys(ds) {
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Train/valid/test proportions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, valid_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let fracs = [train_frac, valid_frac, test_frac];
        if fracs.iter().any(|&f| !(0.0..1.0).contains(&f) || f <= 0.0) {
            return Err(Error::InvalidArgument(
                "split fractions must lie in (0,1)".into(),
            ));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(SplitSpec {
            train_frac,
            valid_frac,
            test_frac,
            seed,
        })
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.6,
            valid_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

/// Disjoint row partition by seeded shuffle and contiguous slicing.
/// Valid and test sizes are floored; remainder rows go to train.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if ds.n < 5 {
        return Err(Error::InvalidArgument("split needs n >= 5".into()));
    }
    let mut order: Vec<usize> = (0..ds.n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let n_valid = (spec.valid_frac * ds.n as f64).floor() as usize;
    let n_test = (spec.test_frac * ds.n as f64).floor() as usize;
    let n_train = ds.n - n_valid - n_test;
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(Error::EmptySplit);
    }
    let train = ds.select(&order[..n_train])?;
    let valid = ds.select(&order[n_train..n_train + n_valid])?;
    let test = ds.select(&order[n_train + n_valid..])?;
    Ok((train, valid, test))
}

/// Scale of the label logits in the synthetic generator.
const LABEL_SCALE: f64 = 0.75;

/// Synthetic data where the XOR of the first two sensitive attributes shifts
/// the features along a fixed unit direction. Each first-order marginal is
/// balanced in expectation while the intersections are separated, so a
/// fairness-agnostic fit is marginally fair but subgroup-unfair.
pub fn generate_gerrymandered(
    n: usize,
    d: usize,
    q: usize,
    mu: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 8 || d < 1 || q < 2 || q > MAX_SENSITIVE {
        return Err(Error::InvalidArgument(
            "generator needs n >= 8, d >= 1, 2 <= q <= 30".into(),
        ));
    }
    if mu < 0.0 || noise <= 0.0 {
        return Err(Error::InvalidArgument(
            "generator needs mu >= 0 and noise > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = 1.0 / (d as f64).sqrt();

    let mut features = Vec::with_capacity(n * d);
    let mut sensitive = Vec::with_capacity(n * q);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row_start = sensitive.len();
        for _ in 0..q {
            sensitive.push(rng.random_bool(0.5) as u8);
        }
        let parity = if sensitive[row_start] ^ sensitive[row_start + 1] == 1 {
            1.0
        } else {
            -1.0
        };
        let mut logit = 0.0;
        for _ in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let x = mu * parity * direction + noise * eps;
            features.push(x);
            logit += LABEL_SCALE * direction * x;
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        labels.push(rng.random_bool(p) as u8);
    }
    Dataset::new(features, sensitive, labels, d, q)
}

/// Canonical 40-row illustration of subgroup disparity hiding behind
/// balanced marginals: q=2, four subgroups of 10 rows, fixed scores with
/// per-subgroup positive rates 0.9/0.9/0.1/0.1. Returns the dataset and the
/// score vector.
pub fn subgroup_disparity_fixture() -> (Dataset, Vec<f64>) {
    let mut sensitive = Vec::new();
    let mut scores = Vec::new();
    for (a, b, positives) in [(0u8, 0u8, 9), (0, 1, 9), (1, 0, 1), (1, 1, 1)] {
        for k in 0..10 {
            sensitive.push(a);
            sensitive.push(b);
            scores.push(if k < positives { 0.9 } else { 0.1 });
        }
    }
    let labels: Vec<u8> = scores.iter().map(|&p| (p >= 0.5) as u8).collect();
    let features = vec![0.0; 40];
    let ds = Dataset::new(features, sensitive, labels, 1, 2).expect("fixture is valid");
    (ds, scores)
}

/// Loads the dataset CSV: header roles by prefix (`x_` feature, `s_`
/// sensitive, `y` label), row order preserved.
pub fn load_csv(path: &Path, q: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let header = reader.headers()?.clone();
    let mut x_cols = Vec::new();
    let mut s_cols = Vec::new();
    let mut y_col = None;
    for (idx, name) in header.iter().enumerate() {
        if name.starts_with("x_") {
            x_cols.push(idx);
        } else if name.starts_with("s_") {
            s_cols.push(idx);
        } else if name == "y" {
            if y_col.is_some() {
                return Err(Error::InvalidHeader("multiple `y` columns".into()));
            }
            y_col = Some(idx);
        } else {
            return Err(Error::InvalidHeader(format!(
                "column `{name}` has no role prefix (expected x_, s_ or y)"
            )));
        }
    }
    let y_col = y_col.ok_or_else(|| Error::InvalidHeader("missing `y` column".into()))?;
    if x_cols.is_empty() {
        return Err(Error::InvalidHeader("no feature columns".into()));
    }
    if s_cols.len() != q {
        return Err(Error::SensitiveCountMismatch {
            expected: q,
            found: s_cols.len(),
        });
    }

    let d = x_cols.len();
    let mut features = Vec::new();
    let mut sensitive = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected {} fields, got {}", header.len(), record.len()),
            });
        }
        for &idx in &x_cols {
            let raw = record.get(idx).unwrap_or("");
            let value: f64 = raw.trim().parse().map_err(|_| Error::MalformedRow {
                row,
                reason: format!("bad feature value `{raw}`"),
            })?;
            if !value.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    reason: format!("non-finite feature value `{raw}`"),
                });
            }
            features.push(value);
        }
        for &idx in &s_cols {
            let raw = record.get(idx).unwrap_or("").trim();
            sensitive.push(parse_binary(raw).ok_or_else(|| Error::NonBinarySensitive {
                row,
                column: header.get(idx).unwrap_or("?").to_string(),
                value: raw.to_string(),
            })?);
        }
        let raw = record.get(y_col).unwrap_or("").trim();
        labels.push(parse_binary(raw).ok_or_else(|| Error::NonBinaryLabel {
            row,
            value: raw.to_string(),
        })?);
    }
    Dataset::new(features, sensitive, labels, d, q)
}

fn parse_binary(raw: &str) -> Option<u8> {
    match raw.parse::<f64>() {
        Ok(v) if v == 0.0 => Some(0),
        Ok(v) if v == 1.0 => Some(1),
        _ => None,
    }
}

/// Writes the dataset in the same CSV format `load_csv` reads.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut cols: Vec<String> = (0..ds.d).map(|j| format!("x_{j}")).collect();
    cols.extend((0..ds.q).map(|j| format!("s_{j}")));
    cols.push("y".into());
    writeln!(out, "{}", cols.join(",")).map_err(|e| Error::io(path, e))?;
    for i in 0..ds.n {
        let mut fields: Vec<String> = ds.feature_row(i).iter().map(|v| format!("{v}")).collect();
        fields.extend(ds.sensitive_row(i).iter().map(|b| b.to_string()));
        fields.push(ds.labels[i].to_string());
        writeln!(out, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
