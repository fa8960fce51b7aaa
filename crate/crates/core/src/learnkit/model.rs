use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Example, Label, LearnError, Result};
use crate::params::ParamVector;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Quadratic,
    SoftmaxRegression,
    TinyMlp,
}

/// Strongly convex quadratic with known curvature.
///
/// Per-example loss is `½ δᵀHδ + ξᵀδ` with `δ = w − w*` and `ξ` the example's
/// feature vector (zero-mean noise). The population risk is `½ δᵀHδ`, so
/// `w*` is the exact minimizer with value zero, `α = min λ` and `β = max λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    eigenvalues: Vec<f64>,
    /// Row `i` is the unit eigenvector for `eigenvalues[i]`.
    eigenvectors: Vec<Vec<f64>>,
    /// Dense row-major `d × d` Hessian `Q diag(λ) Qᵀ`.
    hessian: Vec<f64>,
    minimizer: ParamVector,
}

impl Quadratic {
    /// Build `H = Q diag(λ) Qᵀ`. `rotation_seed = None` keeps `Q = I`.
    pub fn new(
        eigenvalues: Vec<f64>,
        minimizer: ParamVector,
        rotation_seed: Option<u64>,
    ) -> Result<Self> {
        let d = eigenvalues.len();
        if d == 0 {
            return Err(LearnError::InvalidSpec("quadratic needs d >= 1".into()));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(LearnError::InvalidSpec(
                "curvature spectrum must be positive and finite".into(),
            ));
        }
        if minimizer.dim() != d {
            return Err(LearnError::DimensionMismatch {
                expected: d,
                got: minimizer.dim(),
            });
        }
        let eigenvectors = match rotation_seed {
            None => (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            Some(seed) => random_orthonormal(d, seed),
        };
        let mut hessian = vec![0.0; d * d];
        for (lambda, q) in eigenvalues.iter().zip(&eigenvectors) {
            for r in 0..d {
                for c in 0..d {
                    hessian[r * d + c] += lambda * q[r] * q[c];
                }
            }
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
            hessian,
            minimizer,
        })
    }

    /// Spectrum evenly spaced on `[alpha, beta]`.
    pub fn with_linear_spectrum(
        alpha: f64,
        beta: f64,
        minimizer: ParamVector,
        rotation_seed: Option<u64>,
    ) -> Result<Self> {
        let d = minimizer.dim();
        if !(alpha > 0.0 && beta >= alpha) {
            return Err(LearnError::InvalidSpec("need 0 < alpha <= beta".into()));
        }
        let spectrum = (0..d)
            .map(|i| {
                if d == 1 {
                    alpha
                } else {
                    alpha + (beta - alpha) * i as f64 / (d - 1) as f64
                }
            })
            .collect();
        Self::new(spectrum, minimizer, rotation_seed)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn alpha(&self) -> f64 {
        self.eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn beta(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvector(&self, i: usize) -> ParamVector {
        ParamVector::new(self.eigenvectors[i].clone())
    }

    pub fn minimizer(&self) -> &ParamVector {
        &self.minimizer
    }

    fn hess_mul(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|r| {
                self.hessian[r * d..(r + 1) * d]
                    .iter()
                    .zip(v)
                    .map(|(h, x)| h * x)
                    .sum()
            })
            .collect()
    }

    /// Population risk `L(w) − L(w*) = ½ (w−w*)ᵀ H (w−w*)`.
    pub fn risk(&self, w: &ParamVector) -> f64 {
        let delta = w.sub(&self.minimizer);
        let hd = self.hess_mul(delta.as_slice());
        0.5 * delta.iter().zip(&hd).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Exact gradient of the population risk, `H (w − w*)`.
    pub fn risk_gradient(&self, w: &ParamVector) -> ParamVector {
        let delta = w.sub(&self.minimizer);
        ParamVector::new(self.hess_mul(delta.as_slice()))
    }

    /// Uniform bound on per-example gradient norms over the ball
    /// `‖w − w*‖ ≤ radius` when every noise sample has norm `≤ noise_norm`.
    pub fn gradient_bound(&self, radius: f64, noise_norm: f64) -> f64 {
        self.beta() * radius + noise_norm
    }

    fn mean_noise(&self, batch: &[Example]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for e in batch {
            check_features(e, d)?;
            for (m, x) in mean.iter_mut().zip(&e.features) {
                *m += x;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Ok(mean)
    }

    fn loss(&self, w: &ParamVector, batch: &[Example]) -> Result<f64> {
        let noise = self.mean_noise(batch)?;
        let delta = w.sub(&self.minimizer);
        let linear: f64 = delta.iter().zip(&noise).map(|(a, b)| a * b).sum();
        Ok(self.risk(w) + linear)
    }

    fn gradient(&self, w: &ParamVector, batch: &[Example]) -> Result<ParamVector> {
        let noise = self.mean_noise(batch)?;
        let mut g = self.risk_gradient(w);
        for (gi, xi) in g.as_mut_slice().iter_mut().zip(&noise) {
            *gi += xi;
        }
        Ok(g)
    }
}

fn random_orthonormal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "rotation", &[d as u64]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        // Modified Gram-Schmidt, applied twice for numerical orthogonality.
        for _ in 0..2 {
            for q in &basis {
                let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    basis
}

fn check_features(e: &Example, d: usize) -> Result<()> {
    if e.features.len() != d {
        return Err(LearnError::DimensionMismatch {
            expected: d,
            got: e.features.len(),
        });
    }
    Ok(())
}

fn class_of(e: &Example, classes: usize) -> Result<usize> {
    match e.label {
        Label::Class(c) if c < classes => Ok(c),
        label => Err(LearnError::BadLabel { label }),
    }
}

/// Numerically stable softmax in place; returns `log Σ exp(z)`.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Multinomial logistic regression with L2 penalty `½ l2 ‖θ‖²` on all
/// parameters. Layout: row-major `classes × features` weights, then biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRegression {
    pub features: usize,
    pub classes: usize,
    pub l2: f64,
}

impl SoftmaxRegression {
    pub fn dim(&self) -> usize {
        self.classes * (self.features + 1)
    }

    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.features;
        let bias = &w[self.classes * d..];
        for (c, z) in out.iter_mut().enumerate() {
            let row = &w[c * d..(c + 1) * d];
            *z = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[c];
        }
    }

    fn loss(&self, w: &ParamVector, batch: &[Example]) -> Result<f64> {
        let mut z = vec![0.0; self.classes];
        let mut total = 0.0;
        for e in batch {
            check_features(e, self.features)?;
            let y = class_of(e, self.classes)?;
            self.logits(w.as_slice(), &e.features, &mut z);
            let target = z[y];
            total += softmax_in_place(&mut z) - target;
        }
        Ok(total / batch.len() as f64 + 0.5 * self.l2 * w.norm_sq())
    }

    fn gradient(&self, w: &ParamVector, batch: &[Example]) -> Result<ParamVector> {
        let d = self.features;
        let mut g = vec![0.0; self.dim()];
        let mut z = vec![0.0; self.classes];
        for e in batch {
            check_features(e, d)?;
            let y = class_of(e, self.classes)?;
            self.logits(w.as_slice(), &e.features, &mut z);
            softmax_in_place(&mut z);
            z[y] -= 1.0;
            for (c, dz) in z.iter().enumerate() {
                for (gi, x) in g[c * d..(c + 1) * d].iter_mut().zip(&e.features) {
                    *gi += dz * x;
                }
                g[self.classes * d + c] += dz;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for (gi, wi) in g.iter_mut().zip(w.iter()) {
            *gi = *gi * inv + self.l2 * wi;
        }
        Ok(ParamVector::new(g))
    }

    fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.classes];
        self.logits(w.as_slice(), x, &mut z);
        argmax(&z)
    }

    /// Bound on the per-batch gradient norm at `w` when every feature vector
    /// has norm at most `feature_norm`: `√2 · √(r² + 1) + l2 ‖w‖`.
    pub fn gradient_bound(&self, w: &ParamVector, feature_norm: f64) -> f64 {
        std::f64::consts::SQRT_2 * (feature_norm * feature_norm + 1.0).sqrt() + self.l2 * w.norm()
    }
}

/// One-hidden-layer perceptron with a smooth ReLU (scaled softplus,
/// `ln(1 + e^{s·a}) / s`) so the loss is differentiable everywhere.
///
/// Layout: `W1 (hidden × features)`, `b1`, `W2 (classes × hidden)`, `b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyMlp {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub sharpness: f64,
    pub l2: f64,
}

impl TinyMlp {
    pub fn dim(&self) -> usize {
        self.hidden * (self.features + 1) + self.classes * (self.hidden + 1)
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.features;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        (b1, w2, b2)
    }

    fn activate(&self, a: f64) -> f64 {
        let s = self.sharpness;
        let x = s * a;
        let sp = if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        };
        sp / s
    }

    fn activate_prime(&self, a: f64) -> f64 {
        let x = self.sharpness * a;
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Returns pre-activations, hidden activations and logits.
    fn forward(&self, w: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ob1, ow2, ob2) = self.offsets();
        let d = self.features;
        let pre: Vec<f64> = (0..self.hidden)
            .map(|j| {
                w[j * d..(j + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + w[ob1 + j]
            })
            .collect();
        let act: Vec<f64> = pre.iter().map(|&a| self.activate(a)).collect();
        let h = self.hidden;
        let logits = (0..self.classes)
            .map(|c| {
                w[ow2 + c * h..ow2 + (c + 1) * h]
                    .iter()
                    .zip(&act)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + w[ob2 + c]
            })
            .collect();
        (pre, act, logits)
    }

    fn loss(&self, w: &ParamVector, batch: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for e in batch {
            check_features(e, self.features)?;
            let y = class_of(e, self.classes)?;
            let (_, _, mut z) = self.forward(w.as_slice(), &e.features);
            let target = z[y];
            total += softmax_in_place(&mut z) - target;
        }
        Ok(total / batch.len() as f64 + 0.5 * self.l2 * w.norm_sq())
    }

    fn gradient(&self, w: &ParamVector, batch: &[Example]) -> Result<ParamVector> {
        let (ob1, ow2, ob2) = self.offsets();
        let (d, h) = (self.features, self.hidden);
        let ws = w.as_slice();
        let mut g = vec![0.0; self.dim()];
        for e in batch {
            check_features(e, d)?;
            let y = class_of(e, self.classes)?;
            let (pre, act, mut z) = self.forward(ws, &e.features);
            softmax_in_place(&mut z);
            z[y] -= 1.0;
            let mut d_act = vec![0.0; h];
            for (c, dz) in z.iter().enumerate() {
                let row = ow2 + c * h;
                for j in 0..h {
                    g[row + j] += dz * act[j];
                    d_act[j] += dz * ws[row + j];
                }
                g[ob2 + c] += dz;
            }
            for j in 0..h {
                let da = d_act[j] * self.activate_prime(pre[j]);
                for (gi, x) in g[j * d..(j + 1) * d].iter_mut().zip(&e.features) {
                    *gi += da * x;
                }
                g[ob1 + j] += da;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for (gi, wi) in g.iter_mut().zip(ws) {
            *gi = *gi * inv + self.l2 * wi;
        }
        Ok(ParamVector::new(g))
    }

    fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        argmax(&self.forward(w.as_slice(), x).2)
    }

    fn initial_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::stream(seed, "mlp-init", &[]);
        let (ob1, ow2, ob2) = self.offsets();
        let s1 = (1.0 / self.features as f64).sqrt();
        let s2 = (1.0 / self.hidden as f64).sqrt();
        let mut w = vec![0.0; self.dim()];
        for (i, v) in w.iter_mut().enumerate() {
            let scale = if i < ob1 {
                s1
            } else if (ow2..ob2).contains(&i) {
                s2
            } else {
                0.0
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
        ParamVector::new(w)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// A loss with exact gradient over mini-batches.
#[derive(Clone, Debug, PartialEq)]
pub enum LossModel {
    Quadratic(Quadratic),
    Softmax(SoftmaxRegression),
    Mlp(TinyMlp),
}

impl LossModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Quadratic(_) => ModelKind::Quadratic,
            Self::Softmax(_) => ModelKind::SoftmaxRegression,
            Self::Mlp(_) => ModelKind::TinyMlp,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.dim(),
            Self::Softmax(s) => s.dim(),
            Self::Mlp(m) => m.dim(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.dim(),
            Self::Softmax(s) => s.features,
            Self::Mlp(m) => m.features,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Self::Quadratic(_) => None,
            Self::Softmax(s) => Some(s.classes),
            Self::Mlp(m) => Some(m.classes),
        }
    }

    pub fn as_quadratic(&self) -> Option<&Quadratic> {
        match self {
            Self::Quadratic(q) => Some(q),
            _ => None,
        }
    }

    fn check(&self, w: &ParamVector, batch: &[Example]) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(LearnError::DimensionMismatch {
                expected: self.dim(),
                got: w.dim(),
            });
        }
        if batch.is_empty() {
            return Err(LearnError::EmptyBatch);
        }
        Ok(())
    }

    /// Mean per-example loss over `batch` (plus the regularizer, if any).
    pub fn loss(&self, w: &ParamVector, batch: &[Example]) -> Result<f64> {
        self.check(w, batch)?;
        match self {
            Self::Quadratic(q) => q.loss(w, batch),
            Self::Softmax(s) => s.loss(w, batch),
            Self::Mlp(m) => m.loss(w, batch),
        }
    }

    pub fn gradient(&self, w: &ParamVector, batch: &[Example]) -> Result<ParamVector> {
        self.check(w, batch)?;
        match self {
            Self::Quadratic(q) => q.gradient(w, batch),
            Self::Softmax(s) => s.gradient(w, batch),
            Self::Mlp(m) => m.gradient(w, batch),
        }
    }

    /// Predicted class, for classification kinds.
    pub fn predict(&self, w: &ParamVector, features: &[f64]) -> Option<usize> {
        match self {
            Self::Quadratic(_) => None,
            Self::Softmax(s) => Some(s.predict(w, features)),
            Self::Mlp(m) => Some(m.predict(w, features)),
        }
    }

    /// Starting point: the origin for convex kinds, a scaled Gaussian draw for
    /// the MLP.
    pub fn initial_params(&self, seed: u64) -> ParamVector {
        match self {
            Self::Mlp(m) => m.initial_params(seed),
            _ => ParamVector::zeros(self.dim()),
        }
    }
}

/// Central finite-difference gradient with step `h`.
pub fn finite_difference_gradient(
    model: &LossModel,
    w: &ParamVector,
    batch: &[Example],
    h: f64,
) -> Result<ParamVector> {
    let mut probe = w.clone();
    let mut g = Vec::with_capacity(w.dim());
    for i in 0..w.dim() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = model.loss(&probe, batch)?;
        probe[i] = orig - h;
        let down = model.loss(&probe, batch)?;
        probe[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(ParamVector::new(g))
}
