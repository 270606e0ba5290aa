//! The doubly-regressing machinery: regression-style R^2 statistics, the
//! weighted DR^2 objective over the sphere, its Fisher-z transform, the
//! ascent-based DR gap, the brute-force grid supremum of the
//! subset/complement IPMs, and exact 1-D Wasserstein distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{subgroup_keys, Dataset};
use crate::model::{discriminate, sigmoid, Discriminator, WeightVector};
use crate::subsets::{MembershipMatrix, SubsetCollection};
use crate::{Error, Result};

/// Clamp inside the Fisher z-transform; keeps the objective finite when
/// |DR^2| reaches 2.
pub const ZDR_CLAMP_EPS: f64 = 1e-6;

/// Below this variance the weighted membership carries no signal and DR^2 is
/// treated as zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-sample variance floor used by the ascent paths. Centered membership
/// columns of a subgroup partition are linearly dependent, so the sphere has
/// directions where the projection variance collapses and the DR^2 ratio
/// (and its gradients, which scale like 1/sqrt(n * variance)) blows up
/// without carrying subset signal. Ascent treats those directions as
/// degenerate. Kept below the smallest admissible vertex variance
/// 4*gamma*(1-gamma).
pub const REL_VARIANCE_FLOOR: f64 = 1e-3;

fn check_signed(y: &[f64], g: &[f64]) -> Result<()> {
    if y.len() != g.len() || y.is_empty() {
        return Err(Error::DimensionMismatch("y and g must have equal nonzero length".into()));
    }
    if y.iter().any(|&x| x != 1.0 && x != -1.0) {
        return Err(Error::InvalidArgument("y entries must be +-1".into()));
    }
    if y.iter().all(|&x| x == y[0]) {
        return Err(Error::DegenerateSubset);
    }
    Ok(())
}

/// 1 - sum (y_i - g_i)^2 / sum (y_i - mean(y))^2.
pub fn r_squared(y: &[f64], g: &[f64]) -> Result<f64> {
    check_signed(y, g)?;
    let n = y.len() as f64;
    let mean: f64 = y.iter().sum::<f64>() / n;
    let denom: f64 = y.iter().map(|&yi| (yi - mean).powi(2)).sum();
    let rss: f64 = y.iter().zip(g).map(|(&yi, &gi)| (yi - gi).powi(2)).sum();
    Ok(1.0 - rss / denom)
}

/// R^2 plus sum (g_i - mean(y))^2 / sum (y_i - mean(y))^2; algebraically
/// equal to the difference of conditional means of g across the two sides.
pub fn r_tilde_squared(y: &[f64], g: &[f64]) -> Result<f64> {
    check_signed(y, g)?;
    let n = y.len() as f64;
    let mean: f64 = y.iter().sum::<f64>() / n;
    let denom: f64 = y.iter().map(|&yi| (yi - mean).powi(2)).sum();
    let rss: f64 = y.iter().zip(g).map(|(&yi, &gi)| (yi - gi).powi(2)).sum();
    let extra: f64 = g.iter().map(|&gi| (gi - mean).powi(2)).sum();
    Ok(1.0 - rss / denom + extra / denom)
}

/// Difference of conditional means: mean of g over y=+1 minus mean over
/// y=-1. Its absolute value is the per-discriminator IPM witness.
pub fn group_mean_gap(y: &[f64], g: &[f64]) -> Result<f64> {
    check_signed(y, g)?;
    let (mut pos, mut neg, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
    for (&yi, &gi) in y.iter().zip(g) {
        if yi == 1.0 {
            pos += gi;
            n_pos += 1;
        } else {
            neg += gi;
            n_neg += 1;
        }
    }
    Ok(pos / n_pos as f64 - neg / n_neg as f64)
}

/// DR^2 at weight vector v and discriminator outputs g:
/// 1 - [sum (v'c_i - g_i)^2 - sum (g_i - mu_v)^2] / sum (v'c_i - mu_v)^2.
pub fn dr_squared(c: &MembershipMatrix, v: &WeightVector, g_of_f: &[f64]) -> Result<f64> {
    if v.len() != c.m || g_of_f.len() != c.n {
        return Err(Error::DimensionMismatch("dr_squared shapes disagree".into()));
    }
    let proj = project_membership(c, v);
    let mu = proj.iter().sum::<f64>() / c.n as f64;
    let denom: f64 = proj.iter().map(|&r| (r - mu).powi(2)).sum();
    if denom < VARIANCE_FLOOR {
        return Err(Error::DegenerateVariance);
    }
    let rss: f64 = proj.iter().zip(g_of_f).map(|(&r, &gi)| (r - gi).powi(2)).sum();
    let spread: f64 = g_of_f.iter().map(|&gi| (gi - mu).powi(2)).sum();
    Ok(1.0 - (rss - spread) / denom)
}

/// DR^2 at each basis vector, i.e. the per-subset R-tilde values.
pub fn per_subset_dr2(c: &MembershipMatrix, g_of_f: &[f64]) -> Result<Vec<f64>> {
    (0..c.m)
        .map(|m| dr_squared(c, &WeightVector::basis(c.m, m), g_of_f))
        .collect()
}

/// Fisher z-transform of |dr2|/2 with clamp eps: monotone in |dr2|,
/// nonnegative, finite for every input.
pub fn z_dr_squared(dr2: f64, eps: f64) -> f64 {
    let t = (dr2.abs() / 2.0).min(1.0 - eps);
    // ln((1+t)/(1-t)) evaluated so tiny |dr2| keeps a nonzero image
    t.ln_1p() - (-t).ln_1p()
}

fn project_membership(c: &MembershipMatrix, v: &WeightVector) -> Vec<f64> {
    let mut proj = vec![0.0; c.n];
    for m in 0..c.m {
        let vm = v.as_slice()[m];
        if vm == 0.0 {
            continue;
        }
        for (r, &ci) in proj.iter_mut().zip(c.col(m)) {
            *r += vm * ci;
        }
    }
    proj
}

/// Shared evaluation of the z-DR^2 objective and its gradient ingredients at
/// fixed scores.
pub(crate) struct ZdrEval {
    pub dr2: f64,
    pub z: f64,
    /// dz/d(dr2); zero at the |.| kink and inside the clamp.
    pub dz_ddr2: f64,
    pub denom: f64,
    /// e_i = v'c_i - mu_v
    pub centered: Vec<f64>,
    /// discriminator outputs on the scores
    pub disc_out: Vec<f64>,
    pub degenerate: bool,
}

pub(crate) fn zdr_eval(
    scores: &[f64],
    c: &MembershipMatrix,
    disc: &Discriminator,
    v: &WeightVector,
    eps: f64,
) -> ZdrEval {
    let n = c.n as f64;
    let proj = project_membership(c, v);
    let mu = proj.iter().sum::<f64>() / n;
    let centered: Vec<f64> = proj.iter().map(|&r| r - mu).collect();
    let denom: f64 = centered.iter().map(|&e| e * e).sum();
    let disc_out = discriminate(disc, scores);
    if denom < VARIANCE_FLOOR.max(REL_VARIANCE_FLOOR * n) {
        return ZdrEval {
            dr2: 0.0,
            z: 0.0,
            dz_ddr2: 0.0,
            denom,
            centered,
            disc_out,
            degenerate: true,
        };
    }
    let rss: f64 = centered
        .iter()
        .zip(&disc_out)
        .map(|(&e, &gi)| (e + mu - gi).powi(2))
        .sum();
    let spread: f64 = disc_out.iter().map(|&gi| (gi - mu).powi(2)).sum();
    let dr2 = 1.0 - (rss - spread) / denom;
    let z = z_dr_squared(dr2, eps);
    let t = dr2.abs() / 2.0;
    let dz_ddr2 = if dr2 == 0.0 || t >= 1.0 - eps {
        0.0
    } else {
        dr2.signum() / (1.0 - t * t)
    };
    ZdrEval { dr2, z, dz_ddr2, denom, centered, disc_out, degenerate: false }
}

/// Gradient of chain * objective wrt (scale, offset).
pub(crate) fn zdr_grad_phi(ev: &ZdrEval, scores: &[f64], chain: f64) -> (f64, f64) {
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..scores.len() {
        let gd = ev.disc_out[i];
        let w = 2.0 * ev.centered[i] / ev.denom * gd * (1.0 - gd);
        da += w * scores[i];
        db += w;
    }
    (chain * da, chain * db)
}

/// Adds the gradient of chain * objective wrt v into `out`.
pub(crate) fn zdr_grad_v(ev: &ZdrEval, c: &MembershipMatrix, chain: f64, out: &mut [f64]) {
    for m in 0..c.m {
        let mean_m = c.col_means[m];
        let mut acc = 0.0;
        for (i, &ci) in c.col(m).iter().enumerate() {
            acc += (ci - mean_m) * (ev.disc_out[i] - ev.dr2 * ev.centered[i]);
        }
        out[m] += chain * 2.0 / ev.denom * acc;
    }
}

/// d(chain * objective)/d score_i.
pub(crate) fn zdr_dscore(ev: &ZdrEval, disc: &Discriminator, chain: f64) -> Vec<f64> {
    ev.centered
        .iter()
        .zip(&ev.disc_out)
        .map(|(&e, &gd)| chain * 2.0 * e / ev.denom * gd * (1.0 - gd) * disc.scale)
        .collect()
}

/// Deterministic probe of strong witnesses: a small bank of sigmoid
/// discriminators at several slopes and centers, evaluated at every basis
/// vertex. Returns the best (z, discriminator, vertex weight). First-order
/// ascent alone stalls at local maxima a trained classifier carves into the
/// discriminator landscape; the probe jumps over them.
pub(crate) fn vertex_probe(
    scores: &[f64],
    c: &MembershipMatrix,
    eps: f64,
) -> (f64, Discriminator, WeightVector) {
    let mut best = (f64::NEG_INFINITY, Discriminator { scale: 1.0, offset: 0.0 }, 0usize);
    for &scale in &[-20.0, -8.0, -3.0, 3.0, 8.0, 20.0] {
        for &center in &[0.2, 0.35, 0.5, 0.65, 0.8] {
            let disc = Discriminator { scale, offset: -scale * center };
            let disc_out = discriminate(&disc, scores);
            for m in 0..c.m {
                let col = c.col(m);
                let mean_m = c.col_means[m];
                let denom: f64 = col.iter().map(|&ci| (ci - mean_m).powi(2)).sum();
                let cov: f64 =
                    col.iter().zip(&disc_out).map(|(&ci, &gi)| (ci - mean_m) * gi).sum();
                let dr2 = 2.0 * cov / denom;
                let z = z_dr_squared(dr2, eps);
                if z > best.0 {
                    best = (z, disc, m);
                }
            }
        }
    }
    (best.0, best.1, WeightVector::basis(c.m, best.2))
}

/// Discriminator-only ascent at a fixed weight vector, best iterate kept.
/// With the weight vector held at a vertex the objective is bounded
/// (|DR^2| <= 1), so this path cannot reach the clamp or explode.
pub(crate) fn phi_ascent_at_vertex(
    scores: &[f64],
    c: &MembershipMatrix,
    phi0: Discriminator,
    v: &WeightVector,
    steps: usize,
    lr_g: f64,
    eps: f64,
) -> (f64, Discriminator) {
    let mut disc = phi0;
    let mut cur = zdr_eval(scores, c, &disc, v, eps);
    let mut best = (cur.z, disc);
    for _ in 0..steps {
        if cur.degenerate || cur.dz_ddr2 == 0.0 {
            break;
        }
        let (da, db) = zdr_grad_phi(&cur, scores, cur.dz_ddr2);
        disc.scale += lr_g * da;
        disc.offset += lr_g * db;
        cur = zdr_eval(scores, c, &disc, v, eps);
        if cur.z > best.0 {
            best = (cur.z, disc);
        }
    }
    best
}

/// Ascent settings for the DR gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrGapConfig {
    pub steps: usize,
    pub lr_g: f64,
    pub lr_v: f64,
    pub restarts: usize,
    pub seed: u64,
    pub clamp_eps: f64,
}

impl Default for DrGapConfig {
    fn default() -> Self {
        DrGapConfig { steps: 50, lr_g: 0.05, lr_v: 0.05, restarts: 3, seed: 0, clamp_eps: ZDR_CLAMP_EPS }
    }
}

/// Single ascent run from a given starting point; returns the best iterate
/// seen, which is never worse than the starting value.
pub fn dr_gap_from(
    scores: &[f64],
    c: &MembershipMatrix,
    phi0: Discriminator,
    v0: &WeightVector,
    cfg: &DrGapConfig,
) -> (f64, Discriminator, WeightVector) {
    let mut disc = phi0;
    let mut v = if v0.as_slice().iter().map(|x| x * x).sum::<f64>() > 0.0 {
        v0.clone()
    } else {
        WeightVector::uniform(c.m)
    };
    let mut cur = zdr_eval(scores, c, &disc, &v, cfg.clamp_eps);
    let mut best = (cur.z, disc, v.clone());
    for _ in 0..cfg.steps {
        if cur.degenerate || cur.dz_ddr2 == 0.0 {
            // no usable gradient: off the variance floor or inside the clamp
            break;
        }
        let (da, db) = zdr_grad_phi(&cur, scores, cur.dz_ddr2);
        let mut dv = vec![0.0; c.m];
        zdr_grad_v(&cur, c, cur.dz_ddr2, &mut dv);
        disc.scale += cfg.lr_g * da;
        disc.offset += cfg.lr_g * db;
        let stepped: Vec<f64> = v
            .as_slice()
            .iter()
            .zip(&dv)
            .map(|(&vi, &gi)| vi + cfg.lr_v * gi)
            .collect();
        v = crate::model::project_sphere(&stepped);
        cur = zdr_eval(scores, c, &disc, &v, cfg.clamp_eps);
        if cur.z > best.0 {
            best = (cur.z, disc, v.clone());
        }
    }
    best
}

/// Multi-restart ascent maximizing z-DR^2 over the discriminator and the
/// sphere. The result is a lower bound of the true supremum; the per-subset
/// vertex maximum at the best discriminator is always evaluated and adopted
/// when it beats the ascent, so the returned triple is self-consistent.
pub fn dr_gap(
    scores: &[f64],
    c: &MembershipMatrix,
    cfg: &DrGapConfig,
) -> Result<(f64, Discriminator, WeightVector)> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("dr_gap needs steps >= 1".into()));
    }
    if scores.len() != c.n {
        return Err(Error::DimensionMismatch("scores length disagrees with membership".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(f64, Discriminator, WeightVector)> = None;
    for restart in 0..cfg.restarts.max(1) {
        let (phi0, v0) = match restart {
            0 => (Discriminator { scale: 1.0, offset: 0.0 }, WeightVector::uniform(c.m)),
            1 => {
                let (_, phi, vertex) = vertex_probe(scores, c, cfg.clamp_eps);
                (phi, vertex)
            }
            _ => {
                let phi = Discriminator {
                    scale: rng.random_range(-6.0..6.0),
                    offset: rng.random_range(-3.0..3.0),
                };
                let raw: Vec<f64> = (0..c.m).map(|_| rng.random_range(-1.0..1.0)).collect();
                (phi, crate::model::project_sphere(&raw))
            }
        };
        let run = dr_gap_from(scores, c, phi0, &v0, cfg);
        if best.as_ref().map_or(true, |b| run.0 > b.0) {
            best = Some(run);
        }
    }
    let (mut z_best, disc, mut v) = best.expect("at least one restart");
    let disc_out = discriminate(&disc, scores);
    for m in 0..c.m {
        let dr2_m = dr_squared(c, &WeightVector::basis(c.m, m), &disc_out)?;
        let z_m = z_dr_squared(dr2_m, cfg.clamp_eps);
        if z_m > z_best {
            z_best = z_m;
            v = WeightVector::basis(c.m, m);
        }
    }
    if !z_best.is_finite() {
        return Err(Error::NonFinite("dr gap objective".into()));
    }
    Ok((z_best, disc, v))
}

/// Rectangular discriminator grid for the brute-force supIPM oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { a_min: -50.0, a_max: 50.0, b_min: -50.0, b_max: 50.0, steps: 101 }
    }
}

impl GridSpec {
    pub fn a_at(&self, i: usize) -> f64 {
        lerp(self.a_min, self.a_max, i, self.steps)
    }

    pub fn b_at(&self, i: usize) -> f64 {
        lerp(self.b_min, self.b_max, i, self.steps)
    }
}

fn lerp(lo: f64, hi: f64, i: usize, steps: usize) -> f64 {
    if steps <= 1 {
        lo
    } else {
        lo + (hi - lo) * i as f64 / (steps - 1) as f64
    }
}

/// Best grid discriminator found by `sup_ipm_grid_detail`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSupremum {
    pub value: f64,
    pub scale: f64,
    pub offset: f64,
    /// Index into the collection's subset list.
    pub subset: usize,
}

/// Max over subsets and grid discriminators of the absolute difference of
/// conditional discriminator means. Subsets with an empty side on this data
/// contribute zero.
pub fn sup_ipm_grid(
    scores: &[f64],
    ds: &Dataset,
    coll: &SubsetCollection,
    grid: &GridSpec,
) -> Result<f64> {
    Ok(sup_ipm_grid_detail(scores, ds, coll, grid)?.value)
}

/// As `sup_ipm_grid` but also reports the maximizing discriminator and
/// subset. Ties resolve to the smallest (a index, b index, subset index).
pub fn sup_ipm_grid_detail(
    scores: &[f64],
    ds: &Dataset,
    coll: &SubsetCollection,
    grid: &GridSpec,
) -> Result<GridSupremum> {
    if scores.len() != ds.n {
        return Err(Error::DimensionMismatch("scores length disagrees with dataset".into()));
    }
    if grid.steps == 0 {
        return Err(Error::InvalidArgument("grid needs at least one step".into()));
    }
    let keys = subgroup_keys(ds);
    let mut key_index = std::collections::BTreeMap::new();
    for key in &keys {
        let next = key_index.len();
        key_index.entry(key.0).or_insert(next);
    }
    let k = key_index.len();
    let row_key: Vec<usize> = keys.iter().map(|key| key_index[&key.0]).collect();
    let mut group_count = vec![0usize; k];
    for &g in &row_key {
        group_count[g] += 1;
    }
    // per subset: which compact subgroups it covers and its sizes here
    let mut active: Vec<(usize, Vec<bool>, f64, f64)> = Vec::new();
    for (idx, subset) in coll.subsets.iter().enumerate() {
        let mut mask = vec![false; k];
        let mut n_in = 0usize;
        for (&bits, &slot) in &key_index {
            if subset.contains(crate::data::SubgroupKey(bits)) {
                mask[slot] = true;
                n_in += group_count[slot];
            }
        }
        if n_in == 0 || n_in == ds.n {
            continue;
        }
        active.push((idx, mask, n_in as f64, (ds.n - n_in) as f64));
    }
    if active.is_empty() {
        return Ok(GridSupremum { value: 0.0, scale: grid.a_at(0), offset: grid.b_at(0), subset: 0 });
    }

    let best = (0..grid.steps)
        .into_par_iter()
        .map(|ia| {
            let a = grid.a_at(ia);
            let mut local = GridSupremum {
                value: -1.0,
                scale: a,
                offset: grid.b_at(0),
                subset: active[0].0,
            };
            let mut sums = vec![0.0; k];
            for ib in 0..grid.steps {
                let b = grid.b_at(ib);
                sums.iter_mut().for_each(|s| *s = 0.0);
                let mut total = 0.0;
                for (i, &p) in scores.iter().enumerate() {
                    let gd = sigmoid(a * p + b);
                    sums[row_key[i]] += gd;
                    total += gd;
                }
                for (idx, mask, n_in, n_out) in &active {
                    let mut s_in = 0.0;
                    for (slot, &inside) in mask.iter().enumerate() {
                        if inside {
                            s_in += sums[slot];
                        }
                    }
                    let gap = (s_in / n_in - (total - s_in) / n_out).abs();
                    if gap > local.value {
                        local = GridSupremum { value: gap, scale: a, offset: b, subset: *idx };
                    }
                }
            }
            (ia, local)
        })
        .reduce(
            || (usize::MAX, GridSupremum { value: -1.0, scale: 0.0, offset: 0.0, subset: 0 }),
            |a, b| {
                if b.1.value > a.1.value || (b.1.value == a.1.value && b.0 < a.0) {
                    b
                } else {
                    a
                }
            },
        );
    Ok(best.1)
}

/// Exact 1-Wasserstein distance between two empirical measures via the
/// integral of the absolute CDF difference over the merged support.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("wasserstein_1d needs nonempty samples".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("wasserstein_1d input".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (wa, wb) = (1.0 / sa.len() as f64, 1.0 / sb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut prev = f64::NAN;
    let mut total = 0.0;
    while ia < sa.len() || ib < sb.len() {
        let t = match (sa.get(ia), sb.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if prev.is_finite() && t > prev {
            total += (t - prev) * (fa - fb).abs();
        }
        while ia < sa.len() && sa[ia] == t {
            fa += wa;
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == t {
            fb += wb;
            ib += 1;
        }
        prev = t;
    }
    Ok(total)
}

/// All fairness quantities of one score vector against one collection.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessEval {
    pub dr2: f64,
    pub z_dr2: f64,
    pub per_subset_rtilde: Vec<f64>,
    pub sup_ipm_grid: f64,
    pub dr_gap: f64,
}

pub fn evaluate_fairness(
    scores: &[f64],
    ds: &Dataset,
    coll: &SubsetCollection,
    c: &MembershipMatrix,
    gap_cfg: &DrGapConfig,
    grid: &GridSpec,
) -> Result<FairnessEval> {
    let (gap, disc, v) = dr_gap(scores, c, gap_cfg)?;
    let disc_out = discriminate(&disc, scores);
    let per_subset_rtilde = per_subset_dr2(c, &disc_out)?;
    let dr2 = match dr_squared(c, &v, &disc_out) {
        Ok(x) => x,
        Err(Error::DegenerateVariance) => 0.0,
        Err(e) => return Err(e),
    };
    let sup = sup_ipm_grid(scores, ds, coll, grid)?;
    Ok(FairnessEval {
        dr2,
        z_dr2: z_dr_squared(dr2, gap_cfg.clamp_eps),
        per_subset_rtilde,
        sup_ipm_grid: sup,
        dr_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{subgroup_disparity_fixture, Dataset};
    use crate::subsets::build_collection;

    const FIX_Y: [f64; 4] = [1.0, 1.0, -1.0, -1.0];
    const FIX_G: [f64; 4] = [0.8, 0.6, 0.2, 0.4];

    #[test]
    fn r_squared_hand_values() {
        assert!((r_squared(&FIX_Y, &FIX_G).unwrap() - 0.1).abs() < 1e-12);
        let mean_pred = [0.0; 4];
        assert!((r_squared(&FIX_Y, &mean_pred).unwrap()).abs() < 1e-12);
        assert!((r_squared(&FIX_Y, &FIX_Y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn r_squared_rejects_constant_y() {
        assert!(matches!(
            r_squared(&[1.0, 1.0], &[0.5, 0.5]),
            Err(Error::DegenerateSubset)
        ));
    }

    #[test]
    fn r_tilde_equals_gap_on_fixture() {
        let rt = r_tilde_squared(&FIX_Y, &FIX_G).unwrap();
        let gap = group_mean_gap(&FIX_Y, &FIX_G).unwrap();
        assert!((rt - 0.4).abs() < 1e-12);
        assert!((gap - 0.4).abs() < 1e-12);
        assert!((rt - gap).abs() < 1e-15);
    }

    #[test]
    fn r_tilde_equals_gap_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..=50usize);
            let mut y: Vec<f64> =
                (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            y[0] = 1.0;
            y[n - 1] = -1.0;
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let rt = r_tilde_squared(&y, &g).unwrap();
            let gap = group_mean_gap(&y, &g).unwrap();
            assert!((rt - gap).abs() < 1e-12, "identity violated: {rt} vs {gap}");
        }
    }

    #[test]
    fn gap_invariances() {
        let shifted: Vec<f64> = FIX_G.iter().map(|x| x + 0.37).collect();
        let flipped: Vec<f64> = FIX_G.iter().map(|x| -x).collect();
        let base = group_mean_gap(&FIX_Y, &FIX_G).unwrap();
        assert!((group_mean_gap(&FIX_Y, &shifted).unwrap() - base).abs() < 1e-12);
        assert!((group_mean_gap(&FIX_Y, &flipped).unwrap() + base).abs() < 1e-12);
        let y_neg: Vec<f64> = FIX_Y.iter().map(|x| -x).collect();
        assert!((group_mean_gap(&y_neg, &FIX_G).unwrap() + base).abs() < 1e-12);
        let constant = [0.42; 4];
        assert!(group_mean_gap(&FIX_Y, &constant).unwrap().abs() < 1e-15);
    }

    #[test]
    fn dr_squared_specializes_to_r_tilde() {
        let c = MembershipMatrix::from_columns(vec![FIX_Y.to_vec()]).unwrap();
        let v = WeightVector(vec![1.0]);
        let dr2 = dr_squared(&c, &v, &FIX_G).unwrap();
        assert!((dr2 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dr_squared_zero_at_centered_constant() {
        let c = MembershipMatrix::from_columns(vec![FIX_Y.to_vec()]).unwrap();
        let v = WeightVector(vec![1.0]);
        // mu_v = 0 here, so a zero discriminator output is centered
        let dr2 = dr_squared(&c, &v, &[0.0; 4]).unwrap();
        assert!(dr2.abs() < 1e-15);
    }

    #[test]
    fn dr_squared_basis_identity_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(4..=20usize);
            let m = rng.random_range(1..=3usize);
            let cols: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let mut col: Vec<f64> =
                        (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
                    col[0] = 1.0;
                    col[n - 1] = -1.0;
                    col
                })
                .collect();
            let c = MembershipMatrix::from_columns(cols.clone()).unwrap();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            for k in 0..m {
                let dr2 = dr_squared(&c, &WeightVector::basis(m, k), &g).unwrap();
                let rt = r_tilde_squared(&cols[k], &g).unwrap();
                assert!((dr2 - rt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn z_transform_values() {
        assert_eq!(z_dr_squared(0.0, ZDR_CLAMP_EPS), 0.0);
        assert!((z_dr_squared(0.4, ZDR_CLAMP_EPS) - 1.5f64.ln()).abs() < 1e-15);
        let clamped = z_dr_squared(2.5, 1e-6);
        let expect = ((2.0_f64 - 1e-6) / 1e-6).ln();
        assert!((clamped - expect).abs() < 1e-9);
        assert!((clamped - 14.5087).abs() < 1e-3);
    }

    #[test]
    fn z_transform_even_and_monotone() {
        let mut prev = 0.0;
        for i in 1..=40 {
            let x = i as f64 * 0.05;
            let z = z_dr_squared(x, ZDR_CLAMP_EPS);
            assert_eq!(z, z_dr_squared(-x, ZDR_CLAMP_EPS));
            assert!(z > prev, "z must strictly increase below the clamp");
            prev = z;
        }
        assert!(z_dr_squared(1e-300, ZDR_CLAMP_EPS) > 0.0);
    }

    #[test]
    fn dr_gap_constant_scores_is_zero() {
        let cols = vec![vec![1.0, 1.0, -1.0, -1.0], vec![1.0, -1.0, 1.0, -1.0]];
        let c = MembershipMatrix::from_columns(cols).unwrap();
        let scores = [0.5; 4];
        let (z, _, _) = dr_gap(&scores, &c, &DrGapConfig::default()).unwrap();
        assert!(z.abs() <= 1e-6, "constant scores should give zero gap, got {z}");
    }

    #[test]
    fn dr_gap_ascent_never_decreases_from_start() {
        let cols = vec![vec![1.0, 1.0, -1.0, -1.0]];
        let c = MembershipMatrix::from_columns(cols).unwrap();
        let scores = [0.9, 0.8, 0.1, 0.2];
        let phi0 = Discriminator { scale: 1.0, offset: 0.0 };
        let v0 = WeightVector(vec![1.0]);
        let cfg = DrGapConfig::default();
        let start = zdr_eval(&scores, &c, &phi0, &v0, cfg.clamp_eps).z;
        let (z, _, _) = dr_gap_from(&scores, &c, phi0, &v0, &cfg);
        assert!(z >= start, "best iterate {z} fell below start {start}");
    }

    #[test]
    fn dr_gap_dominates_vertex_floor() {
        let (ds, scores) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        let c = crate::subsets::membership(&ds, &coll).unwrap();
        let cfg = DrGapConfig::default();
        let (z, disc, _) = dr_gap(&scores, &c, &cfg).unwrap();
        let disc_out = discriminate(&disc, &scores);
        for m in 0..c.m {
            let dr2_m = dr_squared(&c, &WeightVector::basis(c.m, m), &disc_out).unwrap();
            assert!(z + 1e-12 >= z_dr_squared(dr2_m, cfg.clamp_eps));
        }
    }

    #[test]
    fn grid_sup_constant_scores() {
        let (ds, _) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        let scores = vec![0.3; ds.n];
        let sup = sup_ipm_grid(&scores, &ds, &coll, &GridSpec::default()).unwrap();
        assert!(sup < 1e-12);
    }

    #[test]
    fn grid_sup_saturating_discriminator() {
        // one subset, separated scores: a saturating sigmoid acts as an
        // indicator and the gap approaches 1
        let ds = Dataset::new(
            vec![0.0; 4],
            vec![1, 1, 0, 0],
            vec![1, 1, 0, 0],
            1,
            1,
        )
        .unwrap();
        let coll = build_collection(&ds, 0.0, &[1], &[]).unwrap();
        let scores = [0.9, 0.9, 0.1, 0.1];
        let detail = sup_ipm_grid_detail(&scores, &ds, &coll, &GridSpec::default()).unwrap();
        assert!(detail.value >= 0.999, "saturated gap was {}", detail.value);
    }

    #[test]
    fn grid_sup_monotone_under_refinement() {
        let (ds, scores) = subgroup_disparity_fixture();
        let coll = build_collection(&ds, 0.2, &[1], &[]).unwrap();
        let mut prev = 0.0;
        for steps in [26usize, 51, 101] {
            let grid = GridSpec { steps, ..GridSpec::default() };
            let sup = sup_ipm_grid(&scores, &ds, &coll, &grid).unwrap();
            assert!(sup + 1e-15 >= prev, "refinement lowered the supremum");
            prev = sup;
        }
    }

    #[test]
    fn wasserstein_hand_values() {
        assert_eq!(wasserstein_1d(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0, 1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_metric_axioms_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let len = |r: &mut ChaCha8Rng| r.random_range(1..=12usize);
            let sample = |r: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| r.random_range(0.0..1.0)).collect()
            };
            let (na, nb, nc) = (len(&mut rng), len(&mut rng), len(&mut rng));
            let a = sample(&mut rng, na);
            let b = sample(&mut rng, nb);
            let c = sample(&mut rng, nc);
            let dab = wasserstein_1d(&a, &b).unwrap();
            let dba = wasserstein_1d(&b, &a).unwrap();
            let dac = wasserstein_1d(&a, &c).unwrap();
            let dcb = wasserstein_1d(&c, &b).unwrap();
            assert!((dab - dba).abs() < 1e-12);
            assert!(dab <= dac + dcb + 1e-12);
            assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
        }
    }
}
