//! Soft cross-entropy with label smoothing and its geometry.
//!
//! The classification loss compares softmax probabilities of a state against
//! smoothed targets: confidence `p_d` on the labelled class, the remaining
//! mass spread uniformly over the other `C - 1` classes. Subtracting the
//! constant target entropy makes the minimum value exactly zero, attained on
//! a line in state space per label: all wrong-class components sit at offset
//! `delta = -ln((C-1) p_d / (1 - p_d))` below the labelled component, with the
//! all-ones direction free. The module exposes the loss value, gradient and
//! Hessian, the minimizer lines, the mean-subtraction transform the loss is
//! invariant under, the Euclidean distance to a minimizer line, and a
//! numerically constructed class-K lower bound relating loss to distance --
//! the ingredient that makes the training problem strictly dissipative.
//!
//! When the state dimension exceeds the class count, only the first `C`
//! components (the class slice) enter any of these quantities.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Errors from loss construction and evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum SoftCeError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("confidence p_d = {p_d} must lie in (1/C, 1) for C = {num_classes}")]
    ConfidenceOutOfRange { p_d: f64, num_classes: usize },
    #[error("label {label} out of range 1..={num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("state has {dim} components but the class slice needs {num_classes}")]
    StateTooShort { dim: usize, num_classes: usize },
    #[error("non-finite state component {value} at index {index}")]
    NonFiniteState { index: usize, value: f64 },
    #[error("probability vector entry {value} at index {index} outside [0, 1]")]
    EntryOutOfRange { index: usize, value: f64 },
    #[error("probability vector sums to {sum}, expected 1 within 1e-12")]
    NotNormalized { sum: f64 },
}

/// Label-smoothing parameters plus the derived constants of the loss geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    num_classes: usize,
    p_d: f64,
    delta: f64,
    offset: f64,
}

impl SmoothingSpec {
    /// Validates `C >= 2` and `p_d` strictly inside `(1/C, 1)`. At `p_d = 1`
    /// the targets degenerate to hard labels and the minimizers escape to
    /// infinity; at `p_d <= 1/C` the labelled class is not the most probable
    /// target. Both are rejected.
    pub fn new(num_classes: usize, p_d: f64) -> Result<Self, SoftCeError> {
        if num_classes < 2 {
            return Err(SoftCeError::TooFewClasses(num_classes));
        }
        let c = num_classes as f64;
        if !p_d.is_finite() || p_d <= 1.0 / c || p_d >= 1.0 {
            return Err(SoftCeError::ConfidenceOutOfRange { p_d, num_classes });
        }
        let delta = -((c - 1.0) * p_d / (1.0 - p_d)).ln();
        if !(delta < 0.0) {
            // p_d > 1/C forces delta < 0; a non-negative value means p_d sits
            // at the rounding edge of 1/C.
            return Err(SoftCeError::ConfidenceOutOfRange { p_d, num_classes });
        }
        let q_wrong = (1.0 - p_d) / (c - 1.0);
        let offset = -(p_d * p_d.ln() + (c - 1.0) * q_wrong * q_wrong.ln());
        Ok(SmoothingSpec { num_classes, p_d, delta, offset })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn p_d(&self) -> f64 {
        self.p_d
    }

    /// Wrong-class component offset on the minimizer line; negative.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Target entropy subtracted from the raw cross-entropy so the minimum is 0.
    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Target probability of a non-labelled class.
    pub fn q_wrong(&self) -> f64 {
        (1.0 - self.p_d) / (self.num_classes as f64 - 1.0)
    }

    fn check_label(&self, label: usize) -> Result<(), SoftCeError> {
        if label < 1 || label > self.num_classes {
            return Err(SoftCeError::LabelOutOfRange { label, num_classes: self.num_classes });
        }
        Ok(())
    }
}

/// Nonnegative entries summing to one (within 1e-12).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    entries: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, SoftCeError> {
        for (index, &value) in entries.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(SoftCeError::EntryOutOfRange { index, value });
            }
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SoftCeError::NotNormalized { sum });
        }
        Ok(ProbabilityVector { entries })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.entries
    }
}

fn check_finite(x: &[f64]) -> Result<(), SoftCeError> {
    for (index, &value) in x.iter().enumerate() {
        if !value.is_finite() {
            return Err(SoftCeError::NonFiniteState { index, value });
        }
    }
    Ok(())
}

fn check_slice(x: &[f64], num_classes: usize) -> Result<(), SoftCeError> {
    if x.len() < num_classes {
        return Err(SoftCeError::StateTooShort { dim: x.len(), num_classes });
    }
    check_finite(x)
}

/// Log-softmax over the class slice, max-subtracted. Values never leave log
/// space on this path.
pub(crate) fn log_probs(slice: &[f64]) -> Vec<f64> {
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = slice.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum_exp.ln();
    slice.iter().map(|&v| v - lse).collect()
}

/// Softmax probabilities of the first `num_classes` components of `x`.
pub fn softmax(x: &[f64], num_classes: usize) -> Result<ProbabilityVector, SoftCeError> {
    check_slice(x, num_classes)?;
    let lp = log_probs(&x[..num_classes]);
    ProbabilityVector::new(lp.iter().map(|&v| v.exp().min(1.0)).collect())
}

/// Smoothed target distribution for `label`: `p_d` on the labelled class,
/// `(1 - p_d)/(C - 1)` elsewhere.
pub fn soft_targets(label: usize, spec: &SmoothingSpec) -> Result<ProbabilityVector, SoftCeError> {
    spec.check_label(label)?;
    let q_wrong = spec.q_wrong();
    let mut entries = vec![q_wrong; spec.num_classes()];
    entries[label - 1] = spec.p_d();
    ProbabilityVector::new(entries)
}

/// Soft cross-entropy of the class slice of `x` against the smoothed targets
/// of `label`, offset so the minimum value is exactly zero.
pub fn soft_ce(x: &[f64], label: usize, spec: &SmoothingSpec) -> Result<f64, SoftCeError> {
    spec.check_label(label)?;
    check_slice(x, spec.num_classes())?;
    let lp = log_probs(&x[..spec.num_classes()]);
    let q_wrong = spec.q_wrong();
    let mut ce = 0.0;
    for (i, &lpi) in lp.iter().enumerate() {
        let q = if i + 1 == label { spec.p_d() } else { q_wrong };
        ce -= q * lpi;
    }
    // The offset-corrected value is a KL divergence; clamp the rounding dust.
    Ok((ce - spec.offset()).max(0.0))
}

/// Plain cross-entropy `-ln p(label | x)` with hard one-hot targets.
pub fn hard_ce(x: &[f64], label: usize, num_classes: usize) -> Result<f64, SoftCeError> {
    if label < 1 || label > num_classes {
        return Err(SoftCeError::LabelOutOfRange { label, num_classes });
    }
    check_slice(x, num_classes)?;
    let lp = log_probs(&x[..num_classes]);
    Ok(-lp[label - 1])
}

/// Gradient of [`soft_ce`] in the full state dimension: `p(x) - q(label)` on
/// the class slice, zero on any extra components. The Euclidean norm is at
/// most 2 since both vectors lie in the probability simplex.
pub fn soft_ce_gradient(
    x: &[f64],
    label: usize,
    spec: &SmoothingSpec,
) -> Result<Vec<f64>, SoftCeError> {
    spec.check_label(label)?;
    let p = softmax(x, spec.num_classes())?;
    let q_wrong = spec.q_wrong();
    let mut grad = vec![0.0; x.len()];
    for (i, (&pi, g)) in p.entries().iter().zip(grad.iter_mut()).enumerate() {
        let q = if i + 1 == label { spec.p_d() } else { q_wrong };
        *g = pi - q;
    }
    Ok(grad)
}

/// Gradient of [`hard_ce`]: `p(x) - e_label` on the class slice, zero beyond.
pub fn hard_ce_gradient(
    x: &[f64],
    label: usize,
    num_classes: usize,
) -> Result<Vec<f64>, SoftCeError> {
    if label < 1 || label > num_classes {
        return Err(SoftCeError::LabelOutOfRange { label, num_classes });
    }
    let p = softmax(x, num_classes)?;
    let mut grad = vec![0.0; x.len()];
    for (i, (&pi, g)) in p.entries().iter().zip(grad.iter_mut()).enumerate() {
        *g = if i + 1 == label { pi - 1.0 } else { pi };
    }
    Ok(grad)
}

/// Hessian of the cross-entropy over the class slice: `diag(p) - p p^T`.
/// Independent of the targets, so identical for the soft and hard variants.
pub fn soft_ce_hessian(x: &[f64], spec: &SmoothingSpec) -> Result<Array2<f64>, SoftCeError> {
    let c = spec.num_classes();
    let p = softmax(x, c)?;
    let p = p.entries();
    let mut h = Array2::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            h[[i, j]] = if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] };
        }
    }
    Ok(h)
}

/// Mean subtraction `(I - (1/C) 1 1^T) x`: projects onto the zero-sum
/// subspace; softmax and the loss are invariant under it. The whole input is
/// treated as the class slice.
pub fn invariance_transform(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|&v| v - mean).collect()
}

/// The line of minimizers of [`soft_ce`] for one label, anchored at its
/// unique zero-component-sum point.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimizerLine {
    label: usize,
    base_point: Vec<f64>,
}

impl MinimizerLine {
    pub fn new(label: usize, spec: &SmoothingSpec) -> Result<Self, SoftCeError> {
        spec.check_label(label)?;
        let c = spec.num_classes() as f64;
        let delta = spec.delta();
        let mut base_point = vec![delta / c; spec.num_classes()];
        base_point[label - 1] = -(c - 1.0) / c * delta;
        let sum: f64 = base_point.iter().sum();
        assert!(sum.abs() <= 1e-12, "base point must have zero component sum, got {sum}");
        for (i, &v) in base_point.iter().enumerate() {
            if i + 1 != label {
                let gap = v - base_point[label - 1];
                assert!(
                    (gap - delta).abs() <= 1e-12 * (1.0 + delta.abs()),
                    "base point must lie on the minimizer line"
                );
            }
        }
        Ok(MinimizerLine { label, base_point })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// The on-line point with zero component sum.
    pub fn base_point(&self) -> &[f64] {
        &self.base_point
    }

    /// `base + t * 1`.
    pub fn point_at(&self, t: f64) -> Vec<f64> {
        self.base_point.iter().map(|&v| v + t).collect()
    }
}

/// Euclidean distance from the class slice of `x` to the minimizer line of
/// `label`, computed as `|| T x - base ||` with `T` the mean subtraction.
/// Extra state components beyond the class slice contribute nothing.
pub fn dist_to_minimizers(
    x: &[f64],
    label: usize,
    spec: &SmoothingSpec,
) -> Result<f64, SoftCeError> {
    check_slice(x, spec.num_classes())?;
    let line = MinimizerLine::new(label, spec)?;
    let centered = invariance_transform(&x[..spec.num_classes()]);
    let mut sq = 0.0;
    for (v, b) in centered.iter().zip(line.base_point()) {
        let d = v - b;
        sq += d * d;
    }
    Ok(sq.sqrt())
}

/// Piecewise-linear monotone lower bound `alpha` with `alpha(0) = 0`,
/// constant beyond its last knot.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKBound {
    radii: Vec<f64>,
    values: Vec<f64>,
}

impl ClassKBound {
    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let n = self.radii.len();
        if s >= self.radii[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.radii.partition_point(|&r| r <= s);
        let (r0, r1) = (self.radii[hi - 1], self.radii[hi]);
        let (v0, v1) = (self.values[hi - 1], self.values[hi]);
        v0 + (v1 - v0) * (s - r0) / (r1 - r0)
    }

    /// Interpolation knots `(radius, value)`, ascending in both coordinates.
    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.radii.iter().copied().zip(self.values.iter().copied())
    }
}

const ALPHA_DIRECTION_COUNT: usize = 256;
const ALPHA_RADIUS_COUNT: usize = 64;
const ALPHA_RADIUS_MIN: f64 = 1e-3;
const ALPHA_RADIUS_MAX: f64 = 50.0;
const ALPHA_SEED: u64 = 0x5eed_a19a;

/// Unit directions orthogonal to the all-ones vector: the coordinate and
/// coordinate-difference families that realize the flattest growth of the
/// loss, then seeded random fill up to [`ALPHA_DIRECTION_COUNT`].
fn alpha_directions(c: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    let push_normalized = |d: Vec<f64>, dirs: &mut Vec<Vec<f64>>| {
        let n = linalg::norm_sq(&d).sqrt();
        if n > 1e-9 {
            dirs.push(d.iter().map(|v| v / n).collect());
        }
    };
    for i in 0..c {
        for sign in [1.0, -1.0] {
            let mut d = vec![-sign / c as f64; c];
            d[i] += sign;
            push_normalized(d, &mut dirs);
        }
    }
    for i in 0..c {
        for j in 0..c {
            if i != j {
                let mut d = vec![0.0; c];
                d[i] = 1.0;
                d[j] = -1.0;
                push_normalized(d, &mut dirs);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ALPHA_SEED);
    while dirs.len() < ALPHA_DIRECTION_COUNT {
        let v: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        push_normalized(invariance_transform(&v), &mut dirs);
    }
    dirs
}

/// Class-K lower bound of [`soft_ce`] in terms of [`dist_to_minimizers`].
///
/// Built as a sampled radial envelope: for each radius on a logarithmic grid,
/// take the minimum of the loss over the direction set, then the running
/// suffix minimum (monotone), and interpolate with a one-knot lag so the
/// value assigned on `[r_j, r_{j+1}]` never exceeds the sampled minimum at
/// `r_j`. By label symmetry one label suffices. The result is immutable and
/// safe to share across threads.
pub fn lower_bound_alpha(spec: &SmoothingSpec) -> ClassKBound {
    let line = MinimizerLine::new(1, spec).expect("label 1 always valid");
    let base = line.base_point();
    let c = spec.num_classes();
    let dirs = alpha_directions(c);

    let ratio = (ALPHA_RADIUS_MAX / ALPHA_RADIUS_MIN).powf(1.0 / (ALPHA_RADIUS_COUNT as f64 - 1.0));
    let mut radii = vec![0.0];
    for j in 0..ALPHA_RADIUS_COUNT {
        radii.push(ALPHA_RADIUS_MIN * ratio.powi(j as i32));
    }

    let mut sampled = vec![0.0; radii.len()];
    let mut point = vec![0.0; c];
    for (j, &r) in radii.iter().enumerate().skip(1) {
        let mut min_val = f64::INFINITY;
        for d in &dirs {
            for (p, (b, di)) in point.iter_mut().zip(base.iter().zip(d)) {
                *p = b + r * di;
            }
            let v = soft_ce(&point, 1, spec).expect("finite construction point");
            if v < min_val {
                min_val = v;
            }
        }
        sampled[j] = min_val;
    }

    let mut env = sampled.clone();
    for j in (0..env.len() - 1).rev() {
        env[j] = env[j].min(env[j + 1]);
    }

    // Lag the envelope one knot so linear interpolation stays below the
    // sampled minimum everywhere to the right of each knot.
    let mut values = vec![0.0; radii.len()];
    for j in 1..radii.len() {
        values[j] = env[j - 1];
    }

    ClassKBound { radii, values }
}
