//! Evaluation metrics: accuracy at the 1/2 threshold, subgroup parity,
//! order-l marginal parity, Wasserstein marginal parity, positive-rate
//! tables, and Pareto-front utilities.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{subgroup_keys, Dataset, SubgroupKey};
use crate::fairness::{self, DrGapConfig, GridSpec};
use crate::subsets::{membership_filtered, SubsetCollection};
use crate::{Error, Result};

/// Predictions are positive when the score is at least 1/2.
pub const THRESHOLD: f64 = 0.5;

/// Full evaluation of one score vector on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub sp: f64,
    /// Marginal parity by order; orders above q are absent.
    pub mp: BTreeMap<usize, f64>,
    pub wmp: f64,
    pub zdr: f64,
    pub supipm: f64,
    pub n_eval: usize,
}

fn check_lengths(scores: &[f64], n: usize) -> Result<()> {
    if scores.len() != n || n == 0 {
        return Err(Error::DimensionMismatch(format!(
            "scores length {} does not match {n} rows",
            scores.len()
        )));
    }
    Ok(())
}

/// Fraction of rows whose thresholded prediction matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels.len())?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= THRESHOLD) as u8 == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Subgroup parity: max over nonempty subgroups of the size-weighted
/// absolute deviation of the subgroup positive rate from the overall rate.
pub fn sp(scores: &[f64], ds: &Dataset) -> Result<f64> {
    check_lengths(scores, ds.n)?;
    let keys = subgroup_keys(ds);
    let mut per_group: HashMap<u32, (usize, usize)> = HashMap::new();
    let mut positives = 0usize;
    for (i, key) in keys.iter().enumerate() {
        let pos = (scores[i] >= THRESHOLD) as usize;
        positives += pos;
        let entry = per_group.entry(key.0).or_insert((0, 0));
        entry.0 += pos;
        entry.1 += 1;
    }
    let overall = positives as f64 / ds.n as f64;
    let mut worst = 0.0f64;
    for (pos, count) in per_group.values() {
        let rate = *pos as f64 / *count as f64;
        let weighted = *count as f64 / ds.n as f64 * (rate - overall).abs();
        worst = worst.max(weighted);
    }
    Ok(worst)
}

fn for_each_combination(q: usize, l: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..l).collect();
    loop {
        f(&idx);
        // advance to the next combination in lexicographic order
        let mut i = l;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + q - l {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..l {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Order-l marginal parity: max over attribute subsets L of size l of the
/// weighted sum over realized patterns of |pattern rate - overall rate|.
pub fn mp_l(scores: &[f64], ds: &Dataset, l: usize) -> Result<f64> {
    check_lengths(scores, ds.n)?;
    if l == 0 || l > ds.q {
        return Err(Error::InvalidArgument(format!(
            "marginal order {l} out of range for q={}",
            ds.q
        )));
    }
    let positives: Vec<u8> = scores.iter().map(|&p| (p >= THRESHOLD) as u8).collect();
    let overall = positives.iter().map(|&x| x as usize).sum::<usize>() as f64 / ds.n as f64;
    let mut worst = 0.0f64;
    for_each_combination(ds.q, l, |combo| {
        let mut cells: HashMap<u32, (usize, usize)> = HashMap::new();
        for i in 0..ds.n {
            let s = ds.sensitive_row(i);
            let mut pattern = 0u32;
            for (bit, &attr) in combo.iter().enumerate() {
                pattern |= (s[attr] as u32) << bit;
            }
            let entry = cells.entry(pattern).or_insert((0, 0));
            entry.0 += positives[i] as usize;
            entry.1 += 1;
        }
        let mut total = 0.0;
        for (pos, count) in cells.values() {
            let rate = *pos as f64 / *count as f64;
            total += *count as f64 / ds.n as f64 * (rate - overall).abs();
        }
        worst = worst.max(total);
    });
    Ok(worst)
}

/// Wasserstein marginal parity: max over attributes and sides of the
/// size-weighted exact W1 between the side's score distribution and the
/// overall one. Empty sides contribute zero.
pub fn wmp(scores: &[f64], ds: &Dataset) -> Result<f64> {
    check_lengths(scores, ds.n)?;
    let mut worst = 0.0f64;
    for j in 0..ds.q {
        for side in 0..2u8 {
            let subset: Vec<f64> = (0..ds.n)
                .filter(|&i| ds.sensitive_row(i)[j] == side)
                .map(|i| scores[i])
                .collect();
            if subset.is_empty() {
                continue;
            }
            let weight = subset.len() as f64 / ds.n as f64;
            let dist = fairness::wasserstein_1d(&subset, scores)?;
            worst = worst.max(weight * dist);
        }
    }
    Ok(worst)
}

/// Per-subgroup sample count and positive-prediction rate.
pub fn positive_rate_table(
    scores: &[f64],
    ds: &Dataset,
) -> Result<BTreeMap<SubgroupKey, (usize, f64)>> {
    check_lengths(scores, ds.n)?;
    let mut table: BTreeMap<SubgroupKey, (usize, usize)> = BTreeMap::new();
    for (i, key) in subgroup_keys(ds).into_iter().enumerate() {
        let entry = table.entry(key).or_insert((0, 0));
        entry.0 += (scores[i] >= THRESHOLD) as usize;
        entry.1 += 1;
    }
    Ok(table
        .into_iter()
        .map(|(key, (pos, count))| (key, (count, pos as f64 / count as f64)))
        .collect())
}

/// Nondominated points of a (fairness, accuracy) cloud, sorted by fairness.
/// A point dominates another when it has lower fairness with at least equal
/// accuracy, or equal fairness with strictly higher accuracy.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut front: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(fa, ac)| {
            !points.iter().any(|&(fb, bc)| {
                (fb < fa && bc >= ac) || (fb == fa && bc > ac)
            })
        })
        .collect();
    front.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    front
}

/// Full report for one split: parity metrics plus the DR gap and the grid
/// supIPM of the scores against the given collection.
pub fn report(
    scores: &[f64],
    ds: &Dataset,
    coll: &SubsetCollection,
    gap_cfg: &DrGapConfig,
    grid: &GridSpec,
) -> Result<MetricsReport> {
    let acc = accuracy(scores, ds.labels())?;
    let sp_v = sp(scores, ds)?;
    let mut mp = BTreeMap::new();
    mp.insert(1, mp_l(scores, ds, 1)?);
    if ds.q >= 2 {
        mp.insert(2, mp_l(scores, ds, 2)?);
    }
    let wmp_v = wmp(scores, ds)?;
    let (zdr, supipm) = match membership_filtered(ds, coll) {
        Ok((c, _)) => {
            let fair = fairness::evaluate_fairness(scores, ds, coll, &c, gap_cfg, grid)?;
            (fair.dr_gap, fair.sup_ipm_grid)
        }
        // every subset degenerate on this split: no measurable disparity
        Err(Error::EmptyCollection) => (0.0, 0.0),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport { acc, sp: sp_v, mp, wmp: wmp_v, zdr, supipm, n_eval: ds.n })
}

/// Plot-data CSV: `fairness,acc` rows.
pub fn write_pareto_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "fairness,acc").map_err(|e| Error::io(path, e))?;
    for (f, a) in points {
        writeln!(out, "{f},{a}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pareto_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "fairness,acc" {
                return Err(Error::InvalidHeader(format!("unexpected pareto header `{line}`")));
            }
            continue;
        }
        let mut fields = line.split(',');
        let f: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedRow { row: i, reason: "bad fairness value".into() })?;
        let a: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedRow { row: i, reason: "bad acc value".into() })?;
        out.push((f, a));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::subgroup_disparity_fixture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_hand_values() {
        assert!((accuracy(&[0.9, 0.2, 0.7], &[1, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // the >= rule sends 0.5 to the positive side
        let labels = [1, 0, 1, 0];
        let acc = accuracy(&[0.5; 4], &labels).unwrap();
        assert_eq!(acc, 0.5);
        let complement: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
        let acc_c = accuracy(&[0.9, 0.2, 0.7, 0.1], &complement).unwrap();
        let acc_o = accuracy(&[0.9, 0.2, 0.7, 0.1], &labels).unwrap();
        assert!((acc_c + acc_o - 1.0).abs() < 1e-15);
    }

    #[test]
    fn golden_sp() {
        let (ds, scores) = subgroup_disparity_fixture();
        let v = sp(&scores, &ds).unwrap();
        assert!((v - 0.1).abs() < 1e-12, "sp was {v}");
    }

    #[test]
    fn sp_degenerate_cases() {
        let (ds, _) = subgroup_disparity_fixture();
        assert!(sp(&vec![0.9; 40], &ds).unwrap().abs() < 1e-15);
        let single = crate::data::Dataset::new(vec![0.0; 3], vec![1, 1, 1], vec![1, 0, 1], 1, 1)
            .unwrap();
        assert!(sp(&[0.9, 0.1, 0.8], &single).unwrap().abs() < 1e-15);
    }

    #[test]
    fn golden_mp_orders() {
        let (ds, scores) = subgroup_disparity_fixture();
        let mp1 = mp_l(&scores, &ds, 1).unwrap();
        let mp2 = mp_l(&scores, &ds, 2).unwrap();
        assert!((mp1 - 0.4).abs() < 1e-12, "mp1 was {mp1}");
        assert!((mp2 - 0.4).abs() < 1e-12, "mp2 was {mp2}");
        assert!(mp_l(&vec![0.7; 40], &ds, 1).unwrap().abs() < 1e-15);
        assert!(matches!(mp_l(&scores, &ds, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn wmp_hand_value() {
        let ds = crate::data::Dataset::new(
            vec![0.0; 4],
            vec![1, 1, 0, 0],
            vec![1, 1, 0, 0],
            1,
            1,
        )
        .unwrap();
        let scores = [1.0, 1.0, 0.0, 0.0];
        let v = wmp(&scores, &ds).unwrap();
        assert!((v - 0.25).abs() < 1e-15, "wmp was {v}");
        assert!(wmp(&[0.4; 4], &ds).unwrap().abs() < 1e-15);
    }

    #[test]
    fn wmp_vanishes_when_scores_ignore_attributes() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sensitive: Vec<u8> = (0..n).map(|_| rng.random_bool(0.5) as u8).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ds = crate::data::Dataset::new(vec![0.0; n], sensitive, vec![0; n], 1, 1).unwrap();
        assert!(wmp(&scores, &ds).unwrap() < 0.02);
    }

    #[test]
    fn metrics_invariant_to_permutation_and_duplication() {
        let (ds, scores) = subgroup_disparity_fixture();
        let perm: Vec<usize> = (0..ds.n).rev().collect();
        let ds_perm = ds.select(&perm).unwrap();
        let scores_perm: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let doubled_rows: Vec<usize> = (0..ds.n).chain(0..ds.n).collect();
        let ds_doubled = ds.select(&doubled_rows).unwrap();
        let scores_doubled: Vec<f64> = doubled_rows.iter().map(|&i| scores[i]).collect();
        for (alt_ds, alt_scores) in [(&ds_perm, &scores_perm), (&ds_doubled, &scores_doubled)] {
            assert!((sp(&scores, &ds).unwrap() - sp(alt_scores, alt_ds).unwrap()).abs() < 1e-12);
            assert!(
                (mp_l(&scores, &ds, 1).unwrap() - mp_l(alt_scores, alt_ds, 1).unwrap()).abs()
                    < 1e-12
            );
            assert!((wmp(&scores, &ds).unwrap() - wmp(alt_scores, alt_ds).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn golden_positive_rates() {
        let (ds, scores) = subgroup_disparity_fixture();
        let table = positive_rate_table(&scores, &ds).unwrap();
        let rates: Vec<f64> = table.values().map(|&(_, r)| r).collect();
        assert_eq!(table.values().map(|&(c, _)| c).sum::<usize>(), 40);
        assert_eq!(rates, vec![0.9, 0.1, 0.9, 0.1]); // key order 0,1,2,3 = (0,0),(1,0),(0,1),(1,1)
        let all_pos = positive_rate_table(&vec![0.9; 40], &ds).unwrap();
        assert!(all_pos.values().all(|&(_, r)| r == 1.0));
    }

    #[test]
    fn pareto_front_cases() {
        let both = pareto_front(&[(0.1, 0.8), (0.2, 0.9)]);
        assert_eq!(both.len(), 2);
        // a point worse in both coordinates is dominated
        assert_eq!(pareto_front(&[(0.1, 0.9), (0.2, 0.8)]), vec![(0.1, 0.9)]);
        let front = pareto_front(&[(0.1, 0.9), (0.2, 0.85), (0.15, 0.95)]);
        assert_eq!(front, vec![(0.1, 0.9), (0.15, 0.95)]);
        assert_eq!(pareto_front(&[(0.3, 0.5)]), vec![(0.3, 0.5)]);
    }

    #[test]
    fn pareto_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pareto.csv");
        let points = vec![(0.1, 0.9), (0.15, 0.95)];
        write_pareto_csv(&path, &points).unwrap();
        assert_eq!(read_pareto_csv(&path).unwrap(), points);
    }

    #[test]
    fn combination_enumeration_counts() {
        let mut count = 0;
        for_each_combination(6, 2, |_| count += 1);
        assert_eq!(count, 15);
        let mut singles = Vec::new();
        for_each_combination(4, 1, |c| singles.push(c[0]));
        assert_eq!(singles, vec![0, 1, 2, 3]);
        let mut full = 0;
        for_each_combination(3, 3, |_| full += 1);
        assert_eq!(full, 1);
    }
}
