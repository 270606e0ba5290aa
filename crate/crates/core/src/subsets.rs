//! Construction of the subgroup-subset collection and its signed membership
//! matrix.
//!
//! A subgroup-subset is a union of subgroups; fairness is enforced between a
//! subset and its complement. The collection holds, in a fixed order,
//! first-order marginal subsets, second-order marginal subsets, active
//! subgroups admitted by the `gamma` sample-fraction rule, and caller-supplied
//! custom subsets, deduplicated up to complementation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::data::{subgroup_counts, subgroup_keys, Dataset, SubgroupKey};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetKind {
    ActiveSubgroup,
    MarginalOrder1,
    MarginalOrder2,
    Custom,
}

impl SubsetKind {
    pub fn label(self) -> &'static str {
        match self {
            SubsetKind::ActiveSubgroup => "active-subgroup",
            SubsetKind::MarginalOrder1 => "marginal-order-1",
            SubsetKind::MarginalOrder2 => "marginal-order-2",
            SubsetKind::Custom => "custom",
        }
    }
}

/// Membership rule of one subset. Marginals are kept as bit predicates so the
/// rule stays exact on rows whose subgroup never appeared in the build split.
#[derive(Debug, Clone, PartialEq, Eq)]
enum SubsetDef {
    /// { v : v_attr = 1 }
    MarginalOne { attr: usize },
    /// { v : (v_j, v_k) = pattern }
    MarginalTwo { attrs: (usize, usize), pattern: (u8, u8) },
    /// Explicit union of subgroups.
    Subgroups(BTreeSet<u32>),
}

impl SubsetDef {
    fn contains(&self, key: SubgroupKey) -> bool {
        match self {
            SubsetDef::MarginalOne { attr } => key.attr(*attr) == 1,
            SubsetDef::MarginalTwo { attrs, pattern } => {
                key.attr(attrs.0) == pattern.0 && key.attr(attrs.1) == pattern.1
            }
            SubsetDef::Subgroups(set) => set.contains(&key.0),
        }
    }
}

/// One subgroup-subset: its rule, its provenance kind, the subgroups it
/// covered on the build split, and its build-split sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupSubset {
    def: SubsetDef,
    pub kind: SubsetKind,
    /// Subgroups realized on the build split that fall inside the subset.
    pub members: BTreeSet<u32>,
    /// Build-split rows with s in the subset.
    pub count: usize,
}

impl SubgroupSubset {
    pub fn contains(&self, key: SubgroupKey) -> bool {
        self.def.contains(key)
    }
}

/// Ordered subgroup-subset collection.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetCollection {
    pub subsets: Vec<SubgroupSubset>,
    /// Build-split sample count.
    pub n: usize,
    pub q: usize,
    /// min over subsets of min(count, n - count) on the build split.
    pub n_min: usize,
    /// Admission fraction used at build time.
    pub gamma: f64,
}

impl SubsetCollection {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

/// Signed membership matrix: entry (i, m) is +1 when row i's subgroup lies in
/// subset m and -1 otherwise. Stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMatrix {
    cols: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub col_means: Vec<f64>,
}

impl MembershipMatrix {
    pub fn col(&self, m: usize) -> &[f64] {
        &self.cols[m * self.n..(m + 1) * self.n]
    }

    /// Build directly from signed columns; every entry must be +-1 and no
    /// column may be constant. Mostly useful for tests and oracles.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let m = columns.len();
        if m == 0 {
            return Err(Error::EmptyCollection);
        }
        let n = columns[0].len();
        let mut cols = Vec::with_capacity(n * m);
        let mut col_means = Vec::with_capacity(m);
        for (idx, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch("ragged membership columns".into()));
            }
            if col.iter().any(|&x| x != 1.0 && x != -1.0) {
                return Err(Error::InvalidArgument("membership entries must be +-1".into()));
            }
            let sum: f64 = col.iter().sum();
            if sum.abs() == n as f64 {
                return Err(Error::ConstantColumn(idx));
            }
            cols.extend_from_slice(col);
            col_means.push(sum / n as f64);
        }
        Ok(MembershipMatrix { cols, n, m, col_means })
    }
}

fn canonical_class(members: &BTreeSet<u32>, support: &BTreeSet<u32>) -> Vec<u32> {
    // A subset and its complement induce the same column up to sign; use the
    // side containing the smallest realized subgroup as class representative.
    let smallest = *support.iter().next().expect("nonempty support");
    if members.contains(&smallest) {
        members.iter().copied().collect()
    } else {
        support.difference(members).copied().collect()
    }
}

/// Builds the collection: first-order marginals (always admitted), then
/// gamma-filtered second-order marginals, then gamma-filtered active
/// subgroups by descending size, then custom subsets; deduplicated up to
/// complementation, first occurrence kept. Any subset empty or full on the
/// build split is dropped.
pub fn build_collection(
    ds: &Dataset,
    gamma: f64,
    orders: &[usize],
    custom: &[BTreeSet<u32>],
) -> Result<SubsetCollection> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must be in [0,1), got {gamma}")));
    }
    if orders.is_empty() {
        return Err(Error::InvalidArgument("orders must be nonempty".into()));
    }
    if orders.iter().any(|&l| l == 0 || l > 2) {
        return Err(Error::InvalidArgument("built-in marginal orders are 1 and 2".into()));
    }
    let counts: BTreeMap<SubgroupKey, usize> = subgroup_counts(ds);
    let support: BTreeSet<u32> = counts.keys().map(|k| k.0).collect();
    let n = ds.n;
    let threshold = gamma * n as f64;

    let mut candidates: Vec<(SubsetDef, SubsetKind)> = Vec::new();
    if orders.contains(&1) {
        for attr in 0..ds.q {
            candidates.push((SubsetDef::MarginalOne { attr }, SubsetKind::MarginalOrder1));
        }
    }
    if orders.contains(&2) && ds.q >= 2 {
        for j in 0..ds.q {
            for k in (j + 1)..ds.q {
                for bits in 0..4u8 {
                    let pattern = (bits & 1, (bits >> 1) & 1);
                    candidates.push((
                        SubsetDef::MarginalTwo { attrs: (j, k), pattern },
                        SubsetKind::MarginalOrder2,
                    ));
                }
            }
        }
    }
    let mut actives: Vec<(&SubgroupKey, &usize)> = counts.iter().collect();
    actives.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (key, _) in actives {
        let set: BTreeSet<u32> = [key.0].into_iter().collect();
        candidates.push((SubsetDef::Subgroups(set), SubsetKind::ActiveSubgroup));
    }
    for set in custom {
        if set.iter().any(|&bits| u64::from(bits) >= (1u64 << ds.q)) {
            return Err(Error::InvalidArgument(format!(
                "custom subset contains a bitmask out of range for q={}",
                ds.q
            )));
        }
        candidates.push((SubsetDef::Subgroups(set.clone()), SubsetKind::Custom));
    }

    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut subsets = Vec::new();
    for (def, kind) in candidates {
        let members: BTreeSet<u32> = support
            .iter()
            .copied()
            .filter(|&bits| def.contains(SubgroupKey(bits)))
            .collect();
        let count: usize = members.iter().map(|bits| counts[&SubgroupKey(*bits)]).sum();
        if count == 0 || count == n {
            continue;
        }
        let small_side = count.min(n - count) as f64;
        let gamma_filtered =
            matches!(kind, SubsetKind::ActiveSubgroup | SubsetKind::MarginalOrder2);
        if gamma_filtered && small_side < threshold {
            continue;
        }
        let class = canonical_class(&members, &support);
        if !seen.insert(class) {
            continue;
        }
        subsets.push(SubgroupSubset { def, kind, members, count });
    }
    if subsets.is_empty() {
        return Err(Error::EmptyCollection);
    }
    let n_min = subsets
        .iter()
        .map(|w| w.count.min(n - w.count))
        .min()
        .expect("nonempty");
    Ok(SubsetCollection { subsets, n: ds.n, q: ds.q, n_min, gamma })
}

/// Signed membership matrix of a collection on the dataset it was built from.
/// A constant column signals a build bug and is an error.
pub fn membership(ds: &Dataset, coll: &SubsetCollection) -> Result<MembershipMatrix> {
    let (matrix, dropped) = membership_filtered(ds, coll)?;
    if let Some(&idx) = dropped.first() {
        return Err(Error::ConstantColumn(idx));
    }
    Ok(matrix)
}

/// Membership of a collection on any split with the same attribute count.
/// Columns that are constant on this split (a subset empty or full here) are
/// dropped; returns the matrix over kept columns plus the dropped indices.
pub fn membership_filtered(
    ds: &Dataset,
    coll: &SubsetCollection,
) -> Result<(MembershipMatrix, Vec<usize>)> {
    if ds.q != coll.q {
        return Err(Error::DimensionMismatch(format!(
            "collection built with q={}, dataset has q={}",
            coll.q, ds.q
        )));
    }
    let keys = subgroup_keys(ds);
    let mut cols = Vec::with_capacity(ds.n * coll.len());
    let mut col_means = Vec::new();
    let mut dropped = Vec::new();
    for (idx, subset) in coll.subsets.iter().enumerate() {
        let start = cols.len();
        let mut sum = 0.0f64;
        for key in &keys {
            let v = if subset.contains(*key) { 1.0 } else { -1.0 };
            cols.push(v);
            sum += v;
        }
        if sum.abs() == ds.n as f64 {
            cols.truncate(start);
            dropped.push(idx);
        } else {
            col_means.push(sum / ds.n as f64);
        }
    }
    let m = col_means.len();
    if m == 0 {
        return Err(Error::EmptyCollection);
    }
    Ok((MembershipMatrix { cols, n: ds.n, m, col_means }, dropped))
}

/// Human-readable summary: one line per subset plus the collection floor.
pub fn collection_report(coll: &SubsetCollection) -> String {
    let mut out = String::new();
    for (i, w) in coll.subsets.iter().enumerate() {
        out.push_str(&format!(
            "W{:<3} kind={:<17} size={:<7} complement={:<7} subgroups={}\n",
            i + 1,
            w.kind.label(),
            w.count,
            coll.n - w.count,
            w.members.len()
        ));
    }
    out.push_str(&format!(
        "M={} n={} gamma={} n_min={}\n",
        coll.len(),
        coll.n,
        coll.gamma,
        coll.n_min
    ));
    out
}

/// Custom-subset file: one subset per line, comma-separated bitmask integers.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_custom_subsets(path: &Path) -> Result<Vec<BTreeSet<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut set = BTreeSet::new();
        for field in line.split(',') {
            let bits: u32 = field.trim().parse().map_err(|_| Error::MalformedRow {
                row: lineno,
                reason: format!("bad bitmask `{field}` in subset file"),
            })?;
            set.insert(bits);
        }
        out.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::subgroup_disparity_fixture;

    fn column_stats(c: &MembershipMatrix, m: usize) -> (usize, usize) {
        let ins = c.col(m).iter().filter(|&&x| x == 1.0).count();
        (ins, c.n - ins)
    }

    #[test]
    fn fixture_collection_order1() {
        let (ds, _) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        assert_eq!(coll.len(), 6);
        let kinds: Vec<SubsetKind> = coll.subsets.iter().map(|w| w.kind).collect();
        assert_eq!(
            kinds,
            vec![
                SubsetKind::MarginalOrder1,
                SubsetKind::MarginalOrder1,
                SubsetKind::ActiveSubgroup,
                SubsetKind::ActiveSubgroup,
                SubsetKind::ActiveSubgroup,
                SubsetKind::ActiveSubgroup,
            ]
        );
        assert_eq!(coll.n_min, 10);
        // marginals have both sides of size 20
        assert_eq!(coll.subsets[0].count, 20);
        assert_eq!(coll.subsets[1].count, 20);
    }

    #[test]
    fn fixture_collection_large_gamma_keeps_only_marginals() {
        let (ds, _) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.5, &[1], &[]).unwrap();
        assert_eq!(coll.len(), 2);
        assert!(coll.subsets.iter().all(|w| w.kind == SubsetKind::MarginalOrder1));
    }

    #[test]
    fn fixture_order2_dedups_singletons() {
        let (ds, _) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1, 2], &[]).unwrap();
        // with q=2 the second-order patterns are exactly the four subgroups,
        // so the active singletons dedup away
        assert_eq!(coll.len(), 6);
        assert!(coll.subsets.iter().all(|w| w.kind != SubsetKind::ActiveSubgroup));
    }

    #[test]
    fn empty_subgroups_never_enter() {
        // all rows share s = (0,0): the lone singleton is the full support
        // and every marginal has an empty side, so nothing survives
        let ds = Dataset::new(vec![0.0; 4], vec![0, 0, 0, 0, 0, 0, 0, 0], vec![0, 1, 0, 1], 1, 2)
            .unwrap();
        assert!(matches!(build_collection(&ds, 0.0, &[1], &[]), Err(Error::EmptyCollection)));
    }

    #[test]
    fn complementary_customs_dedup() {
        let (ds, _) = subgroup_disparity_fixture();
        let customs = vec![
            [0u32, 3].into_iter().collect::<BTreeSet<u32>>(),
            [1u32, 2].into_iter().collect::<BTreeSet<u32>>(),
        ];
        let coll = build_collection(&ds, 0.2, &[1], &customs).unwrap();
        let n_custom = coll.subsets.iter().filter(|w| w.kind == SubsetKind::Custom).count();
        assert_eq!(n_custom, 1, "complement pair should collapse to one subset");
    }

    #[test]
    fn membership_signs_and_means() {
        let (ds, _) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        let c = membership(&ds, &coll).unwrap();
        assert_eq!((c.n, c.m), (40, 6));
        for m in 0..c.m {
            let (ins, _) = column_stats(&c, m);
            assert_eq!(ins, coll.subsets[m].count);
            let expect = (2.0 * ins as f64 - c.n as f64) / c.n as f64;
            assert!((c.col_means[m] - expect).abs() < 1e-15);
        }
        // first marginal (attribute a = 1) splits 20/20: mean 0
        assert_eq!(c.col_means[0], 0.0);
    }

    #[test]
    fn membership_alternating_rows() {
        let sensitive = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let ds = Dataset::new(vec![0.0; 8], sensitive, vec![0; 8], 1, 1).unwrap();
        let coll = build_collection(&ds, 0.0, &[1], &[]).unwrap();
        let c = membership(&ds, &coll).unwrap();
        assert_eq!(c.col(0), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn no_equal_or_negated_columns() {
        for seed in 0..5 {
            let ds = crate::data::generate_gerrymandered(300, 2, 3, 1.0, 1.0, seed).unwrap();
            let coll = build_collection(&ds, 0.05, &[1, 2], &[]).unwrap();
            let c = membership(&ds, &coll).unwrap();
            for a in 0..c.m {
                for b in (a + 1)..c.m {
                    let equal = c.col(a).iter().zip(c.col(b)).all(|(x, y)| x == y);
                    let negated = c.col(a).iter().zip(c.col(b)).all(|(x, y)| *x == -*y);
                    assert!(!equal && !negated, "columns {a} and {b} are redundant");
                }
            }
        }
    }

    #[test]
    fn report_lists_each_subset() {
        let (ds, _) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        let text = collection_report(&coll);
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("n_min=10"));
        let again = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        assert_eq!(collection_report(&again), text);
    }

    #[test]
    fn custom_subset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("subsets.txt");
        std::fs::write(&path, "# comment\n0,3\n\n1\n").unwrap();
        let sets = read_custom_subsets(&path).unwrap();
        assert_eq!(sets.len(), 2);
        assert!(sets[0].contains(&0) && sets[0].contains(&3));
        assert!(sets[1].contains(&1));
    }
}
