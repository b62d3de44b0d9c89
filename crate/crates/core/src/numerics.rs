//! Numeric kernel shared by every other module: distances, a max-shifted
//! softmax, clamped arccos, seeded random streams and the finite-difference
//! gradient oracle.

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, ensure_same_dim, Result};

/// Half-width of the band kept away from ±1 before taking arccos.
pub const ARCCOS_CLAMP: f64 = 1e-12;

/// Floor on the relative-error denominator used by [`finite_diff_check`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Squared Euclidean distance `Σ (aᵢ − bᵢ)²`.
pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_same_dim(a.len(), b.len(), "sq_euclidean")?;
    if a.is_empty() {
        return Err(contract("sq_euclidean: vectors must have dimension >= 1"));
    }
    Ok(sq_dist(a, b))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Element-wise mean of a non-empty set of equal-length vectors.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| contract("mean of an empty set of vectors"))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        ensure_same_dim(dim, v.len(), "mean_vector")?;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let k = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    Ok(mean)
}

fn check_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(contract("softmax over an empty score list"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(contract(format!("non-finite score {bad}")));
    }
    Ok(scores.iter().copied().fold(f64::INFINITY, f64::min))
}

/// `log Σₙ exp(−Mₙ)`, shifted by the smallest score so nothing overflows.
pub fn log_sum_exp_neg(scores: &[f64]) -> Result<f64> {
    let min = check_scores(scores)?;
    let sum: f64 = scores.iter().map(|s| (min - s).exp()).sum();
    Ok(sum.ln() - min)
}

/// Probabilities `pₙ ∝ exp(−Mₙ)`.
pub fn softmax_of_negated(scores: &[f64]) -> Result<Vec<f64>> {
    let min = check_scores(scores)?;
    let weights: Vec<f64> = scores.iter().map(|s| (min - s).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

pub(crate) fn clamp_unit(u: f64) -> f64 {
    u.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
}

/// arccos with its argument clamped into `[−1+1e−12, 1−1e−12]`.
pub fn safe_arccos(u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(contract(format!("safe_arccos of non-finite value {u}")));
    }
    Ok(clamp_unit(u).acos())
}

/// Derivative of arccos evaluated at the clamped argument.
pub fn safe_arccos_derivative(u: f64) -> f64 {
    let c = clamp_unit(u);
    -1.0 / (1.0 - c * c).sqrt()
}

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(1e−8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / REL_ERR_FLOOR.max(a.abs() + b.abs())
}

/// Largest per-coordinate relative error between `analytic_grad` and the
/// central difference of `f` at `point` with step `h`.
///
/// Panics if `h <= 0` or the gradient length differs from the point's.
pub fn finite_diff_check<F>(f: F, point: &[f64], analytic_grad: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic_grad.len(),
        "analytic gradient has the wrong length"
    );
    central_difference(f, point, h)
        .iter()
        .zip(analytic_grad)
        .map(|(&numeric, &analytic)| relative_error(numeric, analytic))
        .fold(0.0, f64::max)
}

/// Outcome of [`finite_diff_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    /// Max relative error over coordinates with a resolvable gradient.
    pub max_rel_err: f64,
    /// Max absolute error over the remaining coordinates, divided by
    /// `max(1, |f(point)|)`.
    pub max_abs_err: f64,
    /// Number of coordinates compared absolutely.
    pub small: usize,
}

/// Like [`finite_diff_check`], but coordinates where both gradients are below
/// `resolvable · max(1, |f(point)|)` in magnitude are compared by absolute
/// error instead. Central differences carry rounding noise of roughly
/// `ε_mach·|f|/h`, which swamps the relative metric for gradients that are
/// exactly or nearly zero.
pub fn finite_diff_report<F>(mut f: F, point: &[f64], analytic_grad: &[f64], h: f64, resolvable: f64) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic_grad.len(),
        "analytic gradient has the wrong length"
    );
    let scale = f(point).abs().max(1.0);
    let resolvable = resolvable * scale;
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        small: 0,
    };
    for (&numeric, &analytic) in central_difference(f, point, h).iter().zip(analytic_grad) {
        if numeric.abs() < resolvable && analytic.abs() < resolvable {
            report.small += 1;
            report.max_abs_err = report.max_abs_err.max((numeric - analytic).abs() / scale);
        } else {
            report.max_rel_err = report.max_rel_err.max(relative_error(numeric, analytic));
        }
    }
    report
}

// SplitMix64 finalizer constants (Steele, Lea & Flood 2014).
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Draws come from ChaCha8 keyed by `seed` (expanded with `seed_from_u64`) on
/// ChaCha stream `stream_id`, so the sequence is identical on every platform.
/// Forking never touches the parent's position: the child of `(seed, stream)`
/// forked with `id` is keyed by `splitmix(seed ^ splitmix(stream))` on stream `id`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn fork(&self, stream_id: u64) -> Rng {
        Rng::new(splitmix(self.seed ^ splitmix(self.stream_id)), stream_id)
    }

    /// A fresh 64-bit seed derived from this stream's identity.
    pub fn derived_seed(&self) -> u64 {
        splitmix(self.seed ^ splitmix(self.stream_id.wrapping_add(GOLDEN_GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    /// `amount` distinct indices from `0..len`, in draw order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, len, amount).into_vec()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    #[test]
    fn sq_euclidean_examples() {
        assert_eq!(sq_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(sq_euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(sq_euclidean(&[1.0], &[1.0, 2.0]).is_err());
        assert!(sq_euclidean(&[], &[]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_of_negated(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let p = softmax_of_negated(&[-7.25, -7.25]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_of_negated(&[1e5, 1e5]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_of_negated(&[1e6, -1e6, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(softmax_of_negated(&[]).is_err());
        assert!(softmax_of_negated(&[f64::NAN]).is_err());
    }

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let scores = [0.3, -1.2, 2.5];
        let direct: f64 = scores.iter().map(|s: &f64| (-s).exp()).sum::<f64>().ln();
        assert!((log_sum_exp_neg(&scores).unwrap() - direct).abs() < 1e-14);
        assert!((log_sum_exp_neg(&[1e5, 1e5]).unwrap() - (LN_2 - 1e5)).abs() < 1e-9);
    }

    #[test]
    fn arccos_examples() {
        assert!(safe_arccos(1.0).unwrap() < 2e-6);
        assert!((safe_arccos(0.0).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(safe_arccos(1.0 + 1e-9).unwrap(), safe_arccos(1.0).unwrap());
        assert!(safe_arccos(-1.0).unwrap() < std::f64::consts::PI);
        assert!(safe_arccos(f64::INFINITY).is_err());
        assert!(safe_arccos_derivative(1.0).is_finite());
    }

    #[test]
    fn finite_diff_examples() {
        let linear = |x: &[f64]| 3.0 * x[0] + 2.0 * x[1];
        assert!(finite_diff_check(linear, &[0.4, -1.3], &[3.0, 2.0], 1e-5) < 1e-10);
        let quad = |x: &[f64]| x[0] * x[0];
        assert!(finite_diff_check(quad, &[1.0], &[2.0], 1e-5) < 1e-8);
        let err = finite_diff_check(quad, &[1.0], &[1.0], 1e-5);
        assert!((err - 1.0 / 3.0).abs() < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
    }

    fn draws(mut r: Rng) -> Vec<u64> {
        (0..100).map(|_| r.next_u64()).collect()
    }

    #[test]
    fn fork_is_deterministic_and_separates_streams() {
        let root = Rng::new(42, 0);
        assert_eq!(draws(root.fork(1)), draws(root.fork(1)));
        assert_ne!(draws(root.fork(1)), draws(root.fork(2)));
        assert_ne!(draws(root.fork(1).fork(1)), draws(root.fork(2).fork(1)));
        let mut advanced = root.clone();
        advanced.next_u64();
        assert_eq!(draws(advanced.fork(3)), draws(root.fork(3)));
    }

    #[test]
    fn uniform_and_indices_stay_in_range() {
        let mut r = Rng::new(3, 9);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
        let mut idx = r.sample_indices(10, 10);
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }
}
