//! The Gaussian-softmax integral and its closed-form approximations.
//!
//! Given logits a ~ N(mu, S), the predictive probability of class k is
//! E[softmax_k(a)], which has no closed form. This module provides three
//! mean-field approximations of increasing covariance awareness:
//!
//! * mf0: e_k = softmax_k(mu / sqrt(1 + lambda0 * s_k^2)), one adaptive
//!   temperature per output class from that class's own variance.
//! * mf1: e_k = 1 / (1 + sum_{i != k} exp(-(mu_k - mu_i)
//!   / sqrt(1 + lambda0 * (s_k^2 + s_i^2)))), pairwise marginal variances.
//! * mf2: as mf1 but with the full difference variance
//!   s_k^2 + s_i^2 - 2 s_ik, so correlated logits sharpen the estimate.
//!
//! All three reduce to the plain softmax at zero variance and, for two
//! classes, to the probit-style sigmoid approximation
//! sigma(mu / sqrt(1 + lambda0 * var)) applied to the difference variable.
//! The raw estimates do not sum to one, so callers renormalize before
//! reporting probabilities.
//!
//! Two reference integrators calibrate the approximation error: plain Monte
//! Carlo over N(mu, S) and an unscented transform that evaluates the softmax
//! at 2K + 1 sigma points.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, sample_mvn, worker_rng, CholeskyFactor, SymMatrix};

/// Default scale constant, 3 / pi^2. Makes the scaled sigmoid match the
/// standard normal CDF in slope at the origin's second moment.
pub const DEFAULT_LAMBDA0: f64 = 3.0 / (PI * PI);

/// Classic probit-matching alternative, pi / 8.
pub const LAMBDA0_PI_OVER_8: f64 = PI / 8.0;

/// Which mean-field scheme to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MfScheme {
    Mf0,
    Mf1,
    Mf2,
}

impl fmt::Display for MfScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MfScheme::Mf0 => "mf0",
            MfScheme::Mf1 => "mf1",
            MfScheme::Mf2 => "mf2",
        };
        f.write_str(name)
    }
}

impl FromStr for MfScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf0" => Ok(MfScheme::Mf0),
            "mf1" => Ok(MfScheme::Mf1),
            "mf2" => Ok(MfScheme::Mf2),
            other => Err(Error::InvalidConfig(format!(
                "unknown mean-field scheme '{other}' (expected mf0, mf1, or mf2)"
            ))),
        }
    }
}

/// Scheme selection plus the scale constant lambda0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub scheme: MfScheme,
    pub lambda0: f64,
}

impl MfConfig {
    /// The given scheme with the default lambda0 = 3 / pi^2.
    pub fn new(scheme: MfScheme) -> Self {
        MfConfig {
            scheme,
            lambda0: DEFAULT_LAMBDA0,
        }
    }

    /// Any positive lambda0.
    pub fn with_lambda0(scheme: MfScheme, lambda0: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda0 must be a positive finite number, got {lambda0}"
            )));
        }
        Ok(MfConfig { scheme, lambda0 })
    }
}

/// A Gaussian over logits: mean vector mu and covariance S.
///
/// Construction checks that there are at least two classes, that dimensions
/// agree, and that the covariance is positive semi-definite up to a small
/// eigenvalue tolerance. Entries must be finite (the covariance type already
/// guarantees this; a non-finite mean panics).
#[derive(Debug, Clone)]
pub struct GaussianActivation {
    mu: Vec<f64>,
    cov: SymMatrix,
}

impl GaussianActivation {
    pub fn new(mu: Vec<f64>, cov: SymMatrix) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: mu.len(),
                context: "GaussianActivation needs at least two classes",
            });
        }
        if cov.dim() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: mu.len(),
                got: cov.dim(),
                context: "GaussianActivation covariance dimension",
            });
        }
        for &v in &mu {
            assert!(v.is_finite(), "non-finite activation mean entry {v}");
        }
        let (min_eig, max_eig) = crate::linalg::eig_extremes(&cov)?;
        if min_eig < -1e-8 * 1.0f64.max(max_eig) {
            return Err(Error::NegativeVariance(min_eig));
        }
        Ok(GaussianActivation { mu, cov })
    }

    /// Number of classes K.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn cov(&self) -> &SymMatrix {
        &self.cov
    }

    /// Marginal logit variance s_k^2, clamped at zero against roundoff.
    pub fn var(&self, k: usize) -> f64 {
        self.cov.get(k, k).max(0.0)
    }
}

/// A probability vector: entries in [0, 1] summing to one within 1e-9.
///
/// Only produced by operations that guarantee the invariant (softmax,
/// renormalize, the integrators); the constructor asserts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Self {
        let sum: f64 = probs.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-9,
            "probability vector sums to {sum}, not 1"
        );
        for &p in &probs {
            assert!((-1e-12..=1.0 + 1e-9).contains(&p), "probability {p} out of range");
        }
        ProbVector(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Unscented-transform settings; alpha controls the sigma-point spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UkfConfig {
    pub alpha: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        UkfConfig { alpha: 0.5 }
    }
}

impl UkfConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ukf alpha must lie strictly between 0 and 1, got {alpha}"
            )));
        }
        Ok(UkfConfig { alpha })
    }
}

/// Numerically stable softmax. Panics on empty or non-finite input.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    ProbVector::new(out)
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    assert!(!logits.is_empty(), "softmax of empty logits");
    let mut m = f64::NEG_INFINITY;
    for &v in logits {
        assert!(v.is_finite(), "non-finite logit {v}");
        m = m.max(v);
    }
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Logistic sigmoid, stable on both tails.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// sigma(mu / sqrt(1 + lambda0 * var)): the scaled-sigmoid approximation to
/// the expectation of a sigmoid under N(mu, var).
pub fn probit_sigmoid(mu: f64, var: f64, lambda0: f64) -> Result<f64> {
    if var < 0.0 {
        return Err(Error::NegativeVariance(var));
    }
    Ok(sigmoid(mu / (1.0 + lambda0 * var).sqrt()))
}

/// Zeroth mean-field estimate. For each class k the whole mean vector is
/// divided by that class's temperature sqrt(1 + lambda0 * s_k^2) before the
/// softmax, so the K outputs come from K differently tempered softmaxes and
/// do not sum to one.
pub fn mf0(g: &GaussianActivation, lambda0: f64) -> Vec<f64> {
    let k_dim = g.dim();
    let mut scaled = vec![0.0; k_dim];
    let mut probs = vec![0.0; k_dim];
    let mut out = vec![0.0; k_dim];
    for k in 0..k_dim {
        let t = (1.0 + lambda0 * g.var(k)).sqrt();
        for (s, &m) in scaled.iter_mut().zip(g.mu()) {
            *s = m / t;
        }
        softmax_into(&scaled, &mut probs);
        out[k] = probs[k];
    }
    out
}

/// First mean-field estimate: pairwise difference variances from the
/// marginals, ignoring correlations.
pub fn mf1(g: &GaussianActivation, lambda0: f64) -> Vec<f64> {
    let k_dim = g.dim();
    let mut out = vec![0.0; k_dim];
    for k in 0..k_dim {
        let mut denom = 1.0;
        for i in 0..k_dim {
            if i == k {
                continue;
            }
            let dv = g.var(k) + g.var(i);
            denom += (-(g.mu()[k] - g.mu()[i]) / (1.0 + lambda0 * dv).sqrt()).exp();
        }
        out[k] = 1.0 / denom;
    }
    out
}

/// Second mean-field estimate: full difference variances including the
/// covariance term. A valid covariance keeps s_k^2 + s_i^2 - 2 s_ik
/// non-negative; values below -1e-10 signal an invalid input, smaller
/// negatives are roundoff and clamp to zero.
pub fn mf2(g: &GaussianActivation, lambda0: f64) -> Result<Vec<f64>> {
    let k_dim = g.dim();
    let cov = g.cov();
    let mut out = vec![0.0; k_dim];
    for k in 0..k_dim {
        let mut denom = 1.0;
        for i in 0..k_dim {
            if i == k {
                continue;
            }
            let dv = cov.get(k, k) + cov.get(i, i) - 2.0 * cov.get(k, i);
            if dv < -1e-10 {
                return Err(Error::NegativeDifferenceVariance { k, i, value: dv });
            }
            let dv = dv.max(0.0);
            denom += (-(g.mu()[k] - g.mu()[i]) / (1.0 + lambda0 * dv).sqrt()).exp();
        }
        out[k] = 1.0 / denom;
    }
    Ok(out)
}

/// Dispatch on the configured scheme.
pub fn mf_estimate(g: &GaussianActivation, cfg: &MfConfig) -> Result<Vec<f64>> {
    match cfg.scheme {
        MfScheme::Mf0 => Ok(mf0(g, cfg.lambda0)),
        MfScheme::Mf1 => Ok(mf1(g, cfg.lambda0)),
        MfScheme::Mf2 => mf2(g, cfg.lambda0),
    }
}

/// Scale non-negative masses to a probability vector.
pub fn renormalize(e_tilde: &[f64]) -> Result<ProbVector> {
    let mut sum = 0.0;
    for &e in e_tilde {
        assert!(e >= 0.0 && e.is_finite(), "renormalize needs non-negative finite masses, got {e}");
        sum += e;
    }
    if sum <= 1e-300 {
        return Err(Error::ZeroMass(sum));
    }
    Ok(ProbVector::new(e_tilde.iter().map(|e| e / sum).collect()))
}

/// Cholesky with one dampening retry for semi-definite covariances. The bump
/// must clear the factorization's relative pivot tolerance, so it scales
/// with the largest diagonal entry.
fn pd_cholesky(cov: &SymMatrix) -> Result<CholeskyFactor> {
    match cholesky(cov) {
        Ok(f) => Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {
            let max_diag = (0..cov.dim()).fold(0.0f64, |m, i| m.max(cov.get(i, i).abs()));
            let eps = 1e-11 * 1.0f64.max(max_diag);
            cholesky(&cov.add_scaled_identity(eps))
        }
        Err(e) => Err(e),
    }
}

/// Monte Carlo estimate of E[softmax(a)] with a ~ N(mu, S).
///
/// Samples are sharded into fixed-size chunks, each drawn from its own
/// sub-stream of the seed, and partial sums are reduced in chunk order, so
/// the result is identical for a given seed no matter how many worker
/// threads run.
pub fn mc_integral(g: &GaussianActivation, n_samples: usize, seed: u64) -> Result<ProbVector> {
    assert!(n_samples >= 1, "mc_integral needs at least one sample");
    let factor = pd_cholesky(g.cov())?;
    let k_dim = g.dim();
    const CHUNK: usize = 8192;
    let n_chunks = n_samples.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = worker_rng(seed, c as u64);
            let lo = c * CHUNK;
            let len = CHUNK.min(n_samples - lo);
            let mut acc = vec![0.0; k_dim];
            let mut probs = vec![0.0; k_dim];
            for _ in 0..len {
                let a = sample_mvn(g.mu(), &factor, &mut rng).expect("dims checked");
                softmax_into(&a, &mut probs);
                for (s, &p) in acc.iter_mut().zip(&probs) {
                    *s += p;
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; k_dim];
    for part in &partials {
        for (t, &p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    let inv = 1.0 / n_samples as f64;
    for t in total.iter_mut() {
        *t *= inv;
    }
    renormalize(&total)
}

/// Sigma-point weights: the center weight and the common weight shared by
/// the 2K off-center points. They satisfy w0 + 2K * wi = 1.
pub fn ukf_weights(cfg: &UkfConfig, k_dim: usize) -> (f64, f64) {
    let a = cfg.alpha;
    let w0 = -a / (1.0 - a);
    let wi = 1.0 / (2.0 * (1.0 - a) * k_dim as f64);
    (w0, wi)
}

/// Unscented-transform estimate of E[softmax(a)].
///
/// Evaluates the softmax at mu and at mu +- sqrt((1 - alpha) K) L_i for each
/// Cholesky column L_i, combines with the sigma-point weights, clamps any
/// negative entries produced by the negative center weight, and renormalizes.
pub fn ukf_integral(g: &GaussianActivation, cfg: &UkfConfig) -> Result<ProbVector> {
    let factor = pd_cholesky(g.cov())?;
    let k_dim = g.dim();
    let (w0, wi) = ukf_weights(cfg, k_dim);
    let scale = ((1.0 - cfg.alpha) * k_dim as f64).sqrt();

    let mut acc = vec![0.0; k_dim];
    let mut probs = vec![0.0; k_dim];
    softmax_into(g.mu(), &mut probs);
    for (a, &p) in acc.iter_mut().zip(&probs) {
        *a += w0 * p;
    }
    let mut point = vec![0.0; k_dim];
    for col in 0..k_dim {
        let l = factor.column(col);
        for sign in [1.0, -1.0] {
            for i in 0..k_dim {
                point[i] = g.mu()[i] + sign * scale * l[i];
            }
            softmax_into(&point, &mut probs);
            for (a, &p) in acc.iter_mut().zip(&probs) {
                *a += wi * p;
            }
        }
    }
    for a in acc.iter_mut() {
        *a = a.max(0.0);
    }
    renormalize(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn diag_activation(mu: Vec<f64>, vars: Vec<f64>) -> GaussianActivation {
        let cov = SymMatrix::diag(&vars);
        GaussianActivation::new(mu, cov).unwrap()
    }

    fn random_activation(k: usize, rng: &mut impl Rng) -> GaussianActivation {
        let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        // A A^T is positive semi-definite by construction.
        let a: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cov = SymMatrix::from_fn_sym(k, |i, j| {
            (0..k).map(|c| a[i * k + c] * a[j * k + c]).sum()
        });
        GaussianActivation::new(mu, cov).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for &v in p.iter() {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let p = softmax(&[1000.0, 0.0]);
        assert_close(p[0], 1.0, 1e-300);
        assert_close(p[1], 0.0, 1e-300);
    }

    #[test]
    fn softmax_hand_value() {
        let p = softmax(&[1.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        assert_close(p[0], e / (e + 2.0), 1e-15);
        assert_close(p[0], 0.57612, 1e-5);
        assert_close(p[1], 0.21194, 1e-5);
        assert_close(p[2], 0.21194, 1e-5);
    }

    #[test]
    fn probit_sigmoid_zero_mean_is_half() {
        for var in [0.0, 1.0, 100.0] {
            assert_close(probit_sigmoid(0.0, var, DEFAULT_LAMBDA0).unwrap(), 0.5, 1e-15);
        }
    }

    #[test]
    fn probit_sigmoid_zero_variance_is_plain_sigmoid() {
        let v = probit_sigmoid(2.0, 0.0, DEFAULT_LAMBDA0).unwrap();
        assert_close(v, 0.88080, 1e-5);
        assert_close(v, sigmoid(2.0), 0.0);
    }

    #[test]
    fn probit_sigmoid_hand_value() {
        let v = probit_sigmoid(2.0, 3.0, DEFAULT_LAMBDA0).unwrap();
        assert_close(v, 0.80945, 1e-4);
    }

    #[test]
    fn probit_sigmoid_rejects_negative_variance() {
        assert!(matches!(
            probit_sigmoid(1.0, -0.5, DEFAULT_LAMBDA0),
            Err(Error::NegativeVariance(_))
        ));
    }

    #[test]
    fn mf0_zero_covariance_is_exact_softmax() {
        let mut rng = seeded_rng(2);
        for _ in 0..100 {
            let k = rng.gen_range(2..=10);
            let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let g = diag_activation(mu.clone(), vec![0.0; k]);
            let e = mf0(&g, DEFAULT_LAMBDA0);
            let p = softmax(&mu);
            for i in 0..k {
                assert_close(e[i], p[i], 1e-15);
            }
        }
    }

    #[test]
    fn mf0_two_class_matches_probit() {
        // With K=2 the first output is sigma((mu1 - mu2) / sqrt(1 + l0 s1^2)),
        // independent of the second variance.
        for s2 in [0.0, 1.0, 42.0] {
            let g = diag_activation(vec![2.0, 0.0], vec![3.0, s2]);
            let e = mf0(&g, DEFAULT_LAMBDA0);
            let p = probit_sigmoid(2.0, 3.0, DEFAULT_LAMBDA0).unwrap();
            assert_close(e[0], p, 1e-12);
            assert_close(e[0], 0.80945, 1e-4);
        }
    }

    #[test]
    fn mf0_huge_variance_tends_to_uniform() {
        let g = diag_activation(vec![5.0, 0.0, 0.0], vec![1e9, 0.0, 0.0]);
        let e = mf0(&g, DEFAULT_LAMBDA0);
        assert_close(e[0], 1.0 / 3.0, 1e-3);
    }

    #[test]
    fn mf0_nonincreasing_in_own_variance() {
        let mut prev = f64::INFINITY;
        for s2 in [0.0, 0.5, 2.0, 10.0, 1e3, 1e6] {
            let g = diag_activation(vec![3.0, 1.0, -1.0], vec![s2, 0.7, 0.2]);
            let e = mf0(&g, DEFAULT_LAMBDA0);
            assert!(e[0] <= prev + 1e-15, "mf0 rose from {prev} to {} at s2={s2}", e[0]);
            prev = e[0];
        }
    }

    #[test]
    fn mf1_zero_covariance_is_softmax() {
        let mut rng = seeded_rng(3);
        for _ in 0..100 {
            let k = rng.gen_range(2..=10);
            let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let g = diag_activation(mu.clone(), vec![0.0; k]);
            let e = mf1(&g, DEFAULT_LAMBDA0);
            let p = softmax(&mu);
            for i in 0..k {
                assert_close(e[i], p[i], 1e-12);
            }
        }
    }

    #[test]
    fn mf1_symmetric_two_class_is_half() {
        let g = diag_activation(vec![0.0, 0.0], vec![1.3, 0.2]);
        let e = mf1(&g, DEFAULT_LAMBDA0);
        assert_close(e[0], 0.5, 1e-15);
        assert_close(e[1], 0.5, 1e-15);
    }

    #[test]
    fn mf1_two_class_reduction_matches_probit() {
        // The difference variable a1 - a2 is N(2, 1 + 2) for diagonal S.
        let g = diag_activation(vec![2.0, 0.0], vec![1.0, 2.0]);
        let e = mf1(&g, DEFAULT_LAMBDA0);
        let p = probit_sigmoid(2.0, 3.0, DEFAULT_LAMBDA0).unwrap();
        assert_close(e[0], p, 1e-12);
        assert_close(e[1], 1.0 - p, 1e-12);
    }

    #[test]
    fn mf2_diagonal_matches_mf1() {
        let mut rng = seeded_rng(4);
        for _ in 0..50 {
            let k = rng.gen_range(2..=8);
            let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let vars: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..5.0)).collect();
            let g = diag_activation(mu, vars);
            let a = mf1(&g, DEFAULT_LAMBDA0);
            let b = mf2(&g, DEFAULT_LAMBDA0).unwrap();
            assert_eq!(a, b, "diagonal covariance must reduce mf2 to mf1");
        }
    }

    #[test]
    fn mf2_hand_value_with_correlation() {
        let cov = SymMatrix::new(2, vec![2.0, 1.0, 1.0, 2.0]);
        let g = GaussianActivation::new(vec![2.0, 0.0], cov).unwrap();
        let e = mf2(&g, DEFAULT_LAMBDA0).unwrap();
        // difference variance 2 + 2 - 2 = 2
        assert_close(e[0], probit_sigmoid(2.0, 2.0, DEFAULT_LAMBDA0).unwrap(), 1e-12);
        assert_close(e[0], 0.82880, 1e-4);
    }

    #[test]
    fn mf2_perfect_correlation_recovers_softmax() {
        let c = 1.7;
        let cov = SymMatrix::new(2, vec![c, c, c, c]);
        let g = GaussianActivation::new(vec![1.0, -0.5], cov).unwrap();
        let e = mf2(&g, DEFAULT_LAMBDA0).unwrap();
        let p = softmax(&[1.0, -0.5]);
        assert_close(e[0], p[0], 1e-12);
        assert_close(e[1], p[1], 1e-12);
    }

    #[test]
    fn mf2_rejects_meaningfully_negative_difference_variance() {
        // Slightly indefinite covariance that still clears the construction
        // tolerance but has difference variance -2e-8.
        let d = 1e-8;
        let cov = SymMatrix::new(2, vec![1.0, 1.0 + d, 1.0 + d, 1.0]);
        let g = GaussianActivation::new(vec![1.0, 0.0], cov).unwrap();
        match mf2(&g, DEFAULT_LAMBDA0) {
            Err(Error::NegativeDifferenceVariance { value, .. }) => {
                assert!(value < -1e-10);
            }
            other => panic!("expected NegativeDifferenceVariance, got {other:?}"),
        }
    }

    #[test]
    fn renormalize_uniform_and_hand_case() {
        let p = renormalize(&[0.2, 0.2, 0.2]).unwrap();
        for &v in p.iter() {
            assert_close(v, 1.0 / 3.0, 1e-15);
        }
        let p = renormalize(&[0.8, 0.4]).unwrap();
        assert_close(p[0], 2.0 / 3.0, 1e-15);
        assert_close(p[1], 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn renormalize_is_idempotent() {
        let p = renormalize(&[0.3, 0.7]).unwrap();
        let q = renormalize(p.as_slice()).unwrap();
        assert_eq!(p.as_slice(), q.as_slice());
    }

    #[test]
    fn renormalize_rejects_zero_mass() {
        assert!(matches!(renormalize(&[0.0, 0.0]), Err(Error::ZeroMass(_))));
    }

    #[test]
    fn mc_degenerate_variance_matches_softmax() {
        let g = diag_activation(vec![1.0, 0.0, 0.0], vec![1e-12; 3]);
        let p = mc_integral(&g, 100, 7).unwrap();
        let q = softmax(&[1.0, 0.0, 0.0]);
        for i in 0..3 {
            assert_close(p[i], q[i], 1e-5);
        }
    }

    #[test]
    fn mc_symmetric_binary_near_half() {
        let g = diag_activation(vec![0.0, 0.0], vec![1.0, 1.0]);
        let p = mc_integral(&g, 1_000_000, 11).unwrap();
        assert_close(p[0], 0.5, 2e-3);
    }

    #[test]
    fn mc_matches_quadrature_on_scalar_case() {
        // Dense quadrature puts E[sigmoid(N(2, 3))] at 0.793520. The mf0
        // closed form gives 0.80945 for the same input, so the scheme's
        // intrinsic error here is about 0.016.
        let g = diag_activation(vec![2.0, 0.0], vec![3.0, 0.0]);
        let p = mc_integral(&g, 1_000_000, 13).unwrap();
        assert_close(p[0], 0.793520, 2e-3);
        let e = mf0(&g, DEFAULT_LAMBDA0);
        assert_close(e[0], p[0], 0.025);
    }

    #[test]
    fn mc_deterministic_for_fixed_seed() {
        let mut rng = seeded_rng(5);
        let g = random_activation(4, &mut rng);
        let a = mc_integral(&g, 20_000, 99).unwrap();
        let b = mc_integral(&g, 20_000, 99).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn mc_error_shrinks_like_root_n() {
        // Across independent seeds the estimator variance at M samples
        // should be about twice the variance at 2M samples.
        let g = diag_activation(vec![1.0, 0.0, -1.0], vec![2.0, 1.0, 3.0]);
        let estimates = |m: usize| -> Vec<f64> {
            (0..30)
                .map(|s| mc_integral(&g, m, 1000 + s).unwrap()[0])
                .collect()
        };
        let var = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
        };
        let v1 = var(&estimates(2000));
        let v2 = var(&estimates(4000));
        let ratio = v1 / v2;
        assert!(
            (1.2..=3.2).contains(&ratio),
            "variance ratio {ratio} is far from the expected 2"
        );
    }

    #[test]
    fn ukf_weights_sum_to_one() {
        for alpha in [0.1, 0.25, 0.5, 0.75, 0.9] {
            for k in [2usize, 3, 10] {
                let (w0, wi) = ukf_weights(&UkfConfig::new(alpha).unwrap(), k);
                assert_close(w0 + 2.0 * k as f64 * wi, 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn ukf_degenerate_variance_matches_softmax() {
        let g = diag_activation(vec![1.0, 0.0, 0.0], vec![1e-12; 3]);
        let p = ukf_integral(&g, &UkfConfig::default()).unwrap();
        let q = softmax(&[1.0, 0.0, 0.0]);
        for i in 0..3 {
            assert_close(p[i], q[i], 1e-5);
        }
    }

    #[test]
    fn ukf_tracks_monte_carlo() {
        // Working the five sigma points by hand gives
        // -sigmoid(2) + (sigmoid(2 + sqrt(3)) + sigmoid(2 - sqrt(3))
        //   + sigmoid(1.9) + sigmoid(2.1)) / 2 = 0.771203, while quadrature
        // puts the true integral at 0.793318; the transform's intrinsic
        // error on this input is about 0.022.
        let g = diag_activation(vec![2.0, 0.0], vec![3.0, 0.01]);
        let u = ukf_integral(&g, &UkfConfig::default()).unwrap();
        assert_close(u[0], 0.7712030632357955, 1e-9);
        let m = mc_integral(&g, 1_000_000, 17).unwrap();
        assert_close(u[0], m[0], 0.025);
    }

    #[test]
    fn ukf_rejects_bad_alpha() {
        assert!(UkfConfig::new(0.0).is_err());
        assert!(UkfConfig::new(1.0).is_err());
        assert!(UkfConfig::new(0.5).is_ok());
    }

    #[test]
    fn schemes_are_permutation_equivariant() {
        let mut rng = seeded_rng(6);
        for _ in 0..20 {
            let g = random_activation(4, &mut rng);
            let perm = [2usize, 0, 3, 1];
            let pmu: Vec<f64> = perm.iter().map(|&i| g.mu()[i]).collect();
            let pcov = SymMatrix::from_fn_sym(4, |i, j| g.cov().get(perm[i], perm[j]));
            let pg = GaussianActivation::new(pmu, pcov).unwrap();
            let cases: [(Vec<f64>, Vec<f64>); 3] = [
                (mf0(&g, DEFAULT_LAMBDA0), mf0(&pg, DEFAULT_LAMBDA0)),
                (mf1(&g, DEFAULT_LAMBDA0), mf1(&pg, DEFAULT_LAMBDA0)),
                (
                    mf2(&g, DEFAULT_LAMBDA0).unwrap(),
                    mf2(&pg, DEFAULT_LAMBDA0).unwrap(),
                ),
            ];
            for (orig, permuted) in &cases {
                for i in 0..4 {
                    assert_close(permuted[i], orig[perm[i]], 1e-12);
                }
            }
        }
    }

    #[test]
    fn activation_rejects_indefinite_covariance() {
        let cov = SymMatrix::new(2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianActivation::new(vec![0.0, 0.0], cov),
            Err(Error::NegativeVariance(_))
        ));
    }

    #[test]
    fn activation_rejects_single_class_and_dim_mismatch() {
        assert!(GaussianActivation::new(vec![1.0], SymMatrix::identity(1)).is_err());
        assert!(GaussianActivation::new(vec![1.0, 2.0], SymMatrix::identity(3)).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_is_shift_invariant(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..8),
            shift in -50.0f64..50.0,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let a = softmax(&logits);
            let b = softmax(&shifted);
            for i in 0..logits.len() {
                prop_assert!((a[i] - b[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn mean_field_exact_at_zero_variance(
            mu in proptest::collection::vec(-8.0f64..8.0, 2..8),
        ) {
            let g = GaussianActivation::new(mu.clone(), SymMatrix::zeros(mu.len())).unwrap();
            let p = softmax(&mu);
            for e in [mf0(&g, DEFAULT_LAMBDA0), mf1(&g, DEFAULT_LAMBDA0), mf2(&g, DEFAULT_LAMBDA0).unwrap()] {
                for i in 0..mu.len() {
                    prop_assert!((e[i] - p[i]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn renormalized_mean_field_is_probability(
            mu in proptest::collection::vec(-8.0f64..8.0, 2..8),
            vars in proptest::collection::vec(0.0f64..50.0, 2..8),
        ) {
            let k = mu.len().min(vars.len());
            let g = GaussianActivation::new(
                mu[..k].to_vec(),
                SymMatrix::diag(&vars[..k]),
            ).unwrap();
            for e in [mf0(&g, DEFAULT_LAMBDA0), mf1(&g, DEFAULT_LAMBDA0)] {
                let p = renormalize(&e).unwrap();
                let sum: f64 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
        }
    }
}
