//! The three trainable objects: a one-hidden-layer prediction network with a
//! sigmoid output, a sigmoid-affine discriminator, and a unit-sphere weight
//! vector over subsets. Gradients are accumulated by explicit reverse mode
//! over this fixed graph and are checked against finite differences by the
//! oracle module.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::fairness::{self, ZDR_CLAMP_EPS};
use crate::subsets::MembershipMatrix;
use crate::{Error, Result};

/// Scores are clamped into [SCORE_CLAMP, 1 - SCORE_CLAMP] so they stay inside
/// the open unit interval; a clamped score carries zero gradient.
pub const SCORE_CLAMP: f64 = 1e-12;

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// d -> h affine, ReLU, h -> 1 affine, sigmoid. Input is the concatenation of
/// features and sensitive bits, so `input_dim = d + q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl PredictionModel {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        PredictionModel {
            input_dim,
            hidden,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * (self.input_dim + 1) + self.hidden + 1
    }

    /// Parameters in fixed traversal order: w1 row-major, b1, w2, b2.
    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                theta.len()
            )));
        }
        let (w1, rest) = theta.split_at(self.hidden * self.input_dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = b2[0];
        Ok(())
    }

    fn theta_slots(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(std::iter::once(&mut self.b2))
    }

    /// In-place gradient-descent step `theta -= lr * grad`.
    pub fn step(&mut self, lr: f64, d_theta: &[f64]) {
        let nw1 = self.w1.len();
        let h = self.hidden;
        for (w, g) in self.w1.iter_mut().zip(&d_theta[..nw1]) {
            *w -= lr * g;
        }
        for (b, g) in self.b1.iter_mut().zip(&d_theta[nw1..nw1 + h]) {
            *b -= lr * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&d_theta[nw1 + h..nw1 + 2 * h]) {
            *w -= lr * g;
        }
        self.b2 -= lr * d_theta[nw1 + 2 * h];
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|x| x.is_finite())
            && self.b2.is_finite()
    }
}

/// Adam moment accumulators for the prediction network. The DR^2 surrogate
/// is a ratio of sums, so its theta-gradient does not shrink with n the way
/// the mean cross-entropy gradient does; per-coordinate normalization keeps
/// the two terms on a common step scale across multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One Adam update of theta with the given gradient and learning rate.
    pub fn step(&mut self, model: &mut PredictionModel, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((slot, (m, v)), &g) in model
            .theta_slots()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(grad)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *slot -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// g(z) = sigmoid(scale * z + offset); outputs lie in (0,1), so the
/// discriminator class is uniformly bounded by 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discriminator {
    pub scale: f64,
    pub offset: f64,
}

impl Discriminator {
    pub fn apply(&self, z: f64) -> f64 {
        sigmoid(self.scale * z + self.offset)
    }
}

/// Weight vector on the unit sphere; renormalized after every ascent step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn uniform(m: usize) -> Self {
        WeightVector(vec![1.0 / (m as f64).sqrt(); m])
    }

    pub fn basis(m: usize, k: usize) -> Self {
        let mut v = vec![0.0; m];
        v[k] = 1.0;
        WeightVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Projection onto the unit sphere; a (near-)zero vector resets to the
/// uniform point instead of dividing by zero.
pub fn project_sphere(v: &[f64]) -> WeightVector {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        WeightVector(v.iter().map(|x| x / norm).collect())
    } else {
        WeightVector::uniform(v.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub q: usize,
    pub h: usize,
    pub m: usize,
}

/// Seeded initialization: network weights uniform in (-1/sqrt(fan_in),
/// 1/sqrt(fan_in)), discriminator at (1, 0), weight vector at the uniform
/// sphere point.
pub fn init_params(dims: Dims, seed: u64) -> Result<(PredictionModel, Discriminator, WeightVector)> {
    if dims.h == 0 || dims.m == 0 || dims.d == 0 || dims.q == 0 {
        return Err(Error::InvalidArgument("init_params needs positive dims".into()));
    }
    let input_dim = dims.d + dims.q;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PredictionModel::zeros(input_dim, dims.h);
    let bound1 = 1.0 / (input_dim as f64).sqrt();
    for w in model.w1.iter_mut() {
        *w = rng.random_range(-bound1..bound1);
    }
    for b in model.b1.iter_mut() {
        *b = rng.random_range(-bound1..bound1);
    }
    let bound2 = 1.0 / (dims.h as f64).sqrt();
    for w in model.w2.iter_mut() {
        *w = rng.random_range(-bound2..bound2);
    }
    model.b2 = rng.random_range(-bound2..bound2);
    Ok((model, Discriminator { scale: 1.0, offset: 0.0 }, WeightVector::uniform(dims.m)))
}

struct Forward {
    pre: Vec<f64>,
    scores: Vec<f64>,
    clamped: Vec<bool>,
}

fn forward(model: &PredictionModel, ds: &Dataset) -> Result<Forward> {
    if model.input_dim != ds.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects input width {}, dataset provides {}",
            model.input_dim,
            ds.input_dim()
        )));
    }
    let h = model.hidden;
    let mut pre = vec![0.0; ds.n * h];
    let mut scores = vec![0.0; ds.n];
    let mut clamped = vec![false; ds.n];
    let mut input = vec![0.0; model.input_dim];
    for i in 0..ds.n {
        ds.fill_input(i, &mut input);
        let mut logit = model.b2;
        for k in 0..h {
            let mut u = model.b1[k];
            let row = &model.w1[k * model.input_dim..(k + 1) * model.input_dim];
            for (w, x) in row.iter().zip(&input) {
                u += w * x;
            }
            pre[i * h + k] = u;
            if u > 0.0 {
                logit += model.w2[k] * u;
            }
        }
        let raw = sigmoid(logit);
        let p = raw.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        scores[i] = p;
        clamped[i] = p != raw;
    }
    Ok(Forward { pre, scores, clamped })
}

/// Scores of every row, in row order, inside (0,1).
pub fn predict_scores(model: &PredictionModel, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(forward(model, ds)?.scores)
}

/// Discriminator applied elementwise.
pub fn discriminate(g: &Discriminator, scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&z| g.apply(z)).collect()
}

/// Scalar objective selector for `objective` and `backward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Mean cross-entropy of scores against labels.
    Classification,
    /// Raw doubly-regressing statistic (can be negative).
    Dr2,
    /// Fisher-z of |DR^2|/2 with the given clamp.
    ZDr { clamp_eps: f64 },
    /// Classification + lambda * z-DR^2.
    Combined { lambda: f64, clamp_eps: f64 },
}

impl LossKind {
    pub fn zdr() -> Self {
        LossKind::ZDr { clamp_eps: ZDR_CLAMP_EPS }
    }

    pub fn combined(lambda: f64) -> Self {
        LossKind::Combined { lambda, clamp_eps: ZDR_CLAMP_EPS }
    }
}

/// Gradients of one scalar objective with respect to theta, phi and v.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_theta: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub d_v: Vec<f64>,
}

impl GradientBundle {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.d_theta.clone();
        out.extend_from_slice(&self.d_phi);
        out.extend_from_slice(&self.d_v);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.d_theta.iter().chain(&self.d_phi).chain(&self.d_v).all(|x| x.is_finite())
    }
}

/// Value of the selected scalar objective at the current parameters.
pub fn objective(
    model: &PredictionModel,
    g: &Discriminator,
    v: &WeightVector,
    ds: &Dataset,
    c: &MembershipMatrix,
    kind: LossKind,
) -> Result<f64> {
    let scores = predict_scores(model, ds)?;
    let value = match kind {
        LossKind::Classification => crate::train::cross_entropy(&scores, ds.labels())?,
        LossKind::Dr2 => fairness::zdr_eval(&scores, c, g, v, ZDR_CLAMP_EPS).dr2,
        LossKind::ZDr { clamp_eps } => fairness::zdr_eval(&scores, c, g, v, clamp_eps).z,
        LossKind::Combined { lambda, clamp_eps } => {
            let ce = crate::train::cross_entropy(&scores, ds.labels())?;
            ce + lambda * fairness::zdr_eval(&scores, c, g, v, clamp_eps).z
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(value)
}

/// Reverse-mode gradients of the selected objective.
pub fn backward(
    model: &PredictionModel,
    g: &Discriminator,
    v: &WeightVector,
    ds: &Dataset,
    c: &MembershipMatrix,
    kind: LossKind,
) -> Result<GradientBundle> {
    let fw = forward(model, ds)?;
    let n = ds.n;
    let mut d_logit = vec![0.0; n];
    let mut d_phi = vec![0.0; 2];
    let mut d_v = vec![0.0; c.m];

    if matches!(kind, LossKind::Classification | LossKind::Combined { .. }) {
        for i in 0..n {
            if fw.clamped[i] {
                continue;
            }
            let p = fw.scores[i];
            let y = ds.labels()[i] as f64;
            d_logit[i] += (p - y) / n as f64;
        }
    }

    if !matches!(kind, LossKind::Classification) {
        let (fair_scale, clamp_eps) = match kind {
            LossKind::Dr2 => (1.0, ZDR_CLAMP_EPS),
            LossKind::ZDr { clamp_eps } => (1.0, clamp_eps),
            LossKind::Combined { lambda, clamp_eps } => (lambda, clamp_eps),
            LossKind::Classification => unreachable!(),
        };
        let ev = fairness::zdr_eval(&fw.scores, c, g, v, clamp_eps);
        let chain = match kind {
            LossKind::Dr2 => fair_scale,
            _ => fair_scale * ev.dz_ddr2,
        };
        if chain != 0.0 && !ev.degenerate {
            let (da, db) = fairness::zdr_grad_phi(&ev, &fw.scores, chain);
            d_phi[0] += da;
            d_phi[1] += db;
            fairness::zdr_grad_v(&ev, c, chain, &mut d_v);
            let dscore = fairness::zdr_dscore(&ev, g, chain);
            for i in 0..n {
                if fw.clamped[i] {
                    continue;
                }
                let p = fw.scores[i];
                d_logit[i] += dscore[i] * p * (1.0 - p);
            }
        }
    }

    let d_theta = backprop_from_logit_grad(model, ds, &fw, &d_logit);
    let bundle = GradientBundle { d_theta, d_phi, d_v };
    if !bundle.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(bundle)
}

/// Backpropagates an arbitrary per-score cotangent dL/dp into theta. Clamped
/// scores carry zero gradient. Used by the penalty-based trainers.
pub fn backprop_from_score_grad(
    model: &PredictionModel,
    ds: &Dataset,
    dscore: &[f64],
) -> Result<Vec<f64>> {
    let fw = forward(model, ds)?;
    let mut d_logit = vec![0.0; ds.n];
    for i in 0..ds.n {
        if fw.clamped[i] {
            continue;
        }
        let p = fw.scores[i];
        d_logit[i] = dscore[i] * p * (1.0 - p);
    }
    Ok(backprop_from_logit_grad(model, ds, &fw, &d_logit))
}

fn backprop_from_logit_grad(
    model: &PredictionModel,
    ds: &Dataset,
    fw: &Forward,
    d_logit: &[f64],
) -> Vec<f64> {
    let h = model.hidden;
    let input_dim = model.input_dim;
    let mut d_w1 = vec![0.0; h * input_dim];
    let mut d_b1 = vec![0.0; h];
    let mut d_w2 = vec![0.0; h];
    let mut d_b2 = 0.0;
    let mut input = vec![0.0; input_dim];
    for i in 0..ds.n {
        let dt = d_logit[i];
        if dt == 0.0 {
            continue;
        }
        ds.fill_input(i, &mut input);
        d_b2 += dt;
        for k in 0..h {
            let u = fw.pre[i * h + k];
            if u > 0.0 {
                d_w2[k] += dt * u;
                let dpre = dt * model.w2[k];
                d_b1[k] += dpre;
                let row = &mut d_w1[k * input_dim..(k + 1) * input_dim];
                for (dw, x) in row.iter_mut().zip(&input) {
                    *dw += dpre * x;
                }
            }
        }
    }
    let mut d_theta = d_w1;
    d_theta.extend_from_slice(&d_b1);
    d_theta.extend_from_slice(&d_w2);
    d_theta.push(d_b2);
    d_theta
}

/// Flattens (theta, phi, v) in the checkpoint traversal order; `apply_flat`
/// is the inverse. Used by the finite-difference oracle.
pub fn to_flat(model: &PredictionModel, g: &Discriminator, v: &WeightVector) -> Vec<f64> {
    let mut out = model.theta();
    out.push(g.scale);
    out.push(g.offset);
    out.extend_from_slice(v.as_slice());
    out
}

pub fn apply_flat(
    flat: &[f64],
    model: &mut PredictionModel,
    g: &mut Discriminator,
    v: &mut WeightVector,
) -> Result<()> {
    let t = model.param_count();
    if flat.len() != t + 2 + v.len() {
        return Err(Error::DimensionMismatch("flat parameter length mismatch".into()));
    }
    model.set_theta(&flat[..t])?;
    g.scale = flat[t];
    g.offset = flat[t + 1];
    v.0.copy_from_slice(&flat[t + 2..]);
    Ok(())
}

/// Writes the checkpoint: one `d,q,h,M` header line, then one parameter per
/// line (theta, then discriminator scale and offset, then v) with 17
/// significant digits.
pub fn save_checkpoint(
    path: &Path,
    model: &PredictionModel,
    g: &Discriminator,
    v: &WeightVector,
    d: usize,
    q: usize,
) -> Result<()> {
    if model.input_dim != d + q {
        return Err(Error::DimensionMismatch("checkpoint dims disagree with model".into()));
    }
    let mut out = String::new();
    out.push_str(&format!("{},{},{},{}\n", d, q, model.hidden, v.len()));
    for x in to_flat(model, g, v) {
        out.push_str(&format!("{:.16e}\n", x));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back; returns (model, discriminator, weights, d, q).
pub fn load_checkpoint(
    path: &Path,
) -> Result<(PredictionModel, Discriminator, WeightVector, usize, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::BadCheckpoint("empty file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::BadCheckpoint(format!("bad header `{header}`")))?;
    let [d, q, h, m] = dims[..] else {
        return Err(Error::BadCheckpoint("header must be d,q,h,M".into()));
    };
    if d == 0 || q == 0 || h == 0 || m == 0 {
        return Err(Error::BadCheckpoint("zero dimension in header".into()));
    }
    let mut model = PredictionModel::zeros(d + q, h);
    let mut g = Discriminator { scale: 0.0, offset: 0.0 };
    let mut v = WeightVector(vec![0.0; m]);
    let expected = model.param_count() + 2 + m;
    let values: Vec<f64> = lines
        .map(|l| l.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::BadCheckpoint("unparseable parameter line".into()))?;
    if values.len() != expected {
        return Err(Error::BadCheckpoint(format!(
            "expected {expected} parameters, found {}",
            values.len()
        )));
    }
    apply_flat(&values, &mut model, &mut g, &mut v)?;
    Ok((model, g, v, d, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_gerrymandered;

    fn tiny_dataset() -> Dataset {
        Dataset::new(vec![0.5, -1.0, 1.5, 2.0], vec![0, 1], vec![1, 0], 2, 1).unwrap()
    }

    #[test]
    fn zero_model_scores_half() {
        let ds = tiny_dataset();
        let model = PredictionModel::zeros(3, 4);
        let scores = predict_scores(&model, &ds).unwrap();
        assert!(scores.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn hand_evaluated_chain() {
        let ds = tiny_dataset();
        let mut model = PredictionModel::zeros(3, 1);
        model.w1 = vec![0.2, -0.3, 0.4];
        model.b1 = vec![0.1];
        model.w2 = vec![0.7];
        model.b2 = -0.05;
        let scores = predict_scores(&model, &ds).unwrap();
        // row 0: u = 0.1 + 0.2*0.5 - 0.3*(-1.0) + 0.4*0 = 0.5
        let expect0 = sigmoid(0.7 * 0.5 - 0.05);
        // row 1: u = 0.1 + 0.2*1.5 - 0.3*2.0 + 0.4*1 = 0.2
        let expect1 = sigmoid(0.7 * 0.2 - 0.05);
        assert!((scores[0] - expect0).abs() < 1e-12);
        assert!((scores[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn scores_are_pointwise() {
        let ds = generate_gerrymandered(30, 3, 2, 1.0, 1.0, 4).unwrap();
        let (model, _, _) = init_params(Dims { d: 3, q: 2, h: 5, m: 2 }, 1).unwrap();
        let scores = predict_scores(&model, &ds).unwrap();
        let rev: Vec<usize> = (0..ds.n).rev().collect();
        let reversed = ds.select(&rev).unwrap();
        let scores_rev = predict_scores(&model, &reversed).unwrap();
        for i in 0..ds.n {
            assert_eq!(scores[i], scores_rev[ds.n - 1 - i]);
        }
    }

    #[test]
    fn discriminator_values() {
        let g0 = Discriminator { scale: 0.0, offset: 0.3 };
        let out = discriminate(&g0, &[0.1, 0.9]);
        assert_eq!(out[0], out[1]);
        assert!((out[0] - sigmoid(0.3)).abs() < 1e-15);
        let g1 = Discriminator { scale: 1.0, offset: 0.0 };
        assert_eq!(g1.apply(0.0), 0.5);
        let g2 = Discriminator { scale: 2.0, offset: -1.0 };
        assert!((g2.apply(1.0) - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let dims = Dims { d: 3, q: 2, h: 4, m: 4 };
        let (m1, g1, v1) = init_params(dims, 9).unwrap();
        let (m2, _, _) = init_params(dims, 9).unwrap();
        let (m3, _, _) = init_params(dims, 10).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1, m3);
        assert_eq!(g1, Discriminator { scale: 1.0, offset: 0.0 });
        assert_eq!(v1.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        let bound = 1.0 / (5.0f64).sqrt();
        assert!(m1.w1.iter().chain(&m1.b1).all(|w| w.abs() <= bound));
        assert!(m1.w2.iter().all(|w| w.abs() <= 0.5) && m1.b2.abs() <= 0.5);
    }

    #[test]
    fn sphere_projection() {
        let p = project_sphere(&[3.0, 4.0]);
        assert_eq!(p.as_slice(), &[0.6, 0.8]);
        let again = project_sphere(p.as_slice());
        assert!(again.as_slice().iter().zip(p.as_slice()).all(|(a, b)| (a - b).abs() < 1e-15));
        let reset = project_sphere(&[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(reset.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn balanced_ce_has_zero_bias_gradient() {
        let ds = Dataset::new(vec![0.1, 0.2, 0.3, 0.4], vec![0, 1, 0, 1], vec![1, 0, 0, 1], 1, 1)
            .unwrap();
        let model = PredictionModel::zeros(2, 3);
        let g = Discriminator { scale: 1.0, offset: 0.0 };
        let v = WeightVector(vec![1.0]);
        let c = MembershipMatrix::from_columns(vec![vec![1.0, -1.0, 1.0, -1.0]]).unwrap();
        let bundle = backward(&model, &g, &v, &ds, &c, LossKind::Classification).unwrap();
        let b2_grad = bundle.d_theta[bundle.d_theta.len() - 1];
        assert!(b2_grad.abs() < 1e-15, "output bias gradient was {b2_grad}");
        assert!(bundle.d_phi.iter().all(|&x| x == 0.0));
        assert!(bundle.d_v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dims = Dims { d: 3, q: 2, h: 4, m: 3 };
        let (model, g, _) = init_params(dims, 77).unwrap();
        let v = project_sphere(&[0.3, -1.2, 0.9]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save_checkpoint(&path, &model, &g, &v, 3, 2).unwrap();
        let (m2, g2, v2, d, q) = load_checkpoint(&path).unwrap();
        assert_eq!((d, q), (3, 2));
        assert_eq!(model, m2);
        assert_eq!(g, g2);
        assert_eq!(v, v2);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ds = tiny_dataset();
        let model = PredictionModel::zeros(5, 2);
        assert!(matches!(predict_scores(&model, &ds), Err(Error::DimensionMismatch(_))));
    }
}
