//! Incomplete gamma functions and the chi-squared family of distributions.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const MAX_TERMS: usize = 300;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const POISSON_TAIL: f64 = 1e-12;
/// Monte Carlo draws per deterministic shard.
const SHARD: usize = 8192;

fn check_gamma_args(a: f64, x: f64) -> Result<()> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::DomainError(format!("shape a = {a} must be positive")));
    }
    if !(x >= 0.0) {
        return Err(Error::DomainError(format!("x = {x} must be non-negative")));
    }
    Ok(())
}

fn log_prefactor(a: f64, x: f64) -> f64 {
    -x + a * x.ln() - ln_gamma(a)
}

// Σ x^n / (a (a+1) ... (a+n)), valid for x < a + 1.
fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_TERMS {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum.ln() + log_prefactor(a, x)).exp()
}

// Modified Lentz evaluation of the continued fraction for Q(a, x), x >= a + 1.
fn upper_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_TERMS {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (h.ln() + log_prefactor(a, x)).exp()
}

/// `(P(a, x), Q(a, x))` computed on the numerically favourable side.
fn gamma_pair(a: f64, x: f64) -> Result<(f64, f64)> {
    check_gamma_args(a, x)?;
    if x == 0.0 {
        return Ok((0.0, 1.0));
    }
    if x.is_infinite() {
        return Ok((1.0, 0.0));
    }
    if x < a + 1.0 {
        let p = lower_series(a, x).clamp(0.0, 1.0);
        Ok((p, 1.0 - p))
    } else {
        let q = upper_continued_fraction(a, x).clamp(0.0, 1.0);
        Ok((1.0 - q, q))
    }
}

/// Regularized lower incomplete gamma function `P(a, x) = γ(a, x) / Γ(a)`.
pub fn reg_lower_gamma(a: f64, x: f64) -> Result<f64> {
    Ok(gamma_pair(a, x)?.0)
}

/// Regularized upper incomplete gamma function `Q(a, x) = 1 - P(a, x)`.
pub fn reg_upper_gamma(a: f64, x: f64) -> Result<f64> {
    Ok(gamma_pair(a, x)?.1)
}

fn gamma_density(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ((a - 1.0) * x.ln() - x - ln_gamma(a)).exp()
}

/// Inverse of `P(a, ·)`: the `x >= 0` with `P(a, x) = p`.
///
/// Safeguarded Newton inside a shrinking bracket; falls back to bisection
/// whenever the Newton step leaves the bracket.
pub fn inv_reg_lower_gamma(a: f64, p: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::DomainError(format!("shape a = {a} must be positive")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::DomainError(format!("probability p = {p} must lie in [0, 1)")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }

    // Wilson-Hilferty start
    let z = normal_quantile(p);
    let guess = {
        let t = 1.0 / (9.0 * a);
        let wh = a * (1.0 - t + z * t.sqrt()).powi(3);
        if wh > 0.0 {
            wh
        } else {
            (p * (a * ln_gamma(a).exp())).powf(1.0 / a).max(1e-300)
        }
    };

    let mut lo = 0.0;
    let mut hi = guess.max(1e-300);
    while reg_lower_gamma(a, hi)? < p {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::DomainError(format!("no finite inverse for p = {p}")));
        }
    }
    // Residual measured on the smaller tail so that p near 1 keeps full relative precision.
    let upper = p > 0.5;
    let target = if upper { 1.0 - p } else { p };
    let residual = |x: f64| -> Result<f64> {
        let (lower, upper_tail) = gamma_pair(a, x)?;
        Ok(if upper { target - upper_tail } else { lower - target })
    };
    let mut x = guess.clamp(lo, hi);
    for _ in 0..400 {
        let f = residual(x)?;
        if f.abs() <= 1e-15 * target {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = gamma_density(a, x);
        let newton = if dens > 0.0 { x - f / dens } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x || hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Acklam's rational approximation of the standard normal quantile (start values only).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383_577_518_672_69e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    reg_lower_gamma(dof as f64 / 2.0, x / 2.0).expect("valid chi-squared arguments")
}

/// CDF of the non-central chi-squared distribution as a Poisson mixture of
/// central chi-squared CDFs, summed outward from the Poisson mode.
pub fn noncentral_chi2_cdf(dof: usize, lambda: f64, x: f64) -> f64 {
    assert!(dof > 0, "degrees of freedom must be positive");
    assert!(lambda >= 0.0, "non-centrality must be non-negative");
    if x <= 0.0 {
        return 0.0;
    }
    if lambda == 0.0 {
        return chi2_cdf(dof, x);
    }
    let mu = lambda / 2.0;
    let half_k = dof as f64 / 2.0;
    let half_x = x / 2.0;
    let mode = mu.floor() as usize;
    let term = |j: usize| reg_lower_gamma(half_k + j as f64, half_x).expect("valid arguments");

    let w_mode = (-mu + mode as f64 * mu.ln() - ln_gamma(mode as f64 + 1.0)).exp();
    let mut total_w = w_mode;
    let mut sum = w_mode * term(mode);

    let mut w = w_mode;
    for j in (0..mode).rev() {
        w *= (j + 1) as f64 / mu;
        total_w += w;
        sum += w * term(j);
        if w < 1e-20 * total_w {
            break;
        }
    }
    let mut w = w_mode;
    let mut j = mode;
    while 1.0 - total_w > POISSON_TAIL {
        w *= mu / (j + 1) as f64;
        j += 1;
        total_w += w;
        sum += w * term(j);
        if w == 0.0 || j > mode + 100_000 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Two-moment gamma surrogate for `Σ λ_i χ²_1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
}

impl GammaFit {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn variance(&self) -> f64 {
        self.shape * self.scale * self.scale
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        reg_lower_gamma(self.shape, x / self.scale).expect("fitted gamma parameters are positive")
    }

    pub fn sf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        reg_upper_gamma(self.shape, x / self.scale).expect("fitted gamma parameters are positive")
    }
}

/// Welch-Satterthwaite fit: shape `(Σλ)² / (2Σλ²)`, scale `2Σλ² / Σλ`.
pub fn ws_gamma_fit(eigenvalues: &[f64]) -> Result<GammaFit> {
    if eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::DomainError("eigenvalues must be finite and non-negative".into()));
    }
    let sum: f64 = eigenvalues.iter().sum();
    let sum_sq: f64 = eigenvalues.iter().map(|l| l * l).sum();
    if sum == 0.0 {
        return Err(Error::AllZero);
    }
    Ok(GammaFit { shape: sum * sum / (2.0 * sum_sq), scale: 2.0 * sum_sq / sum })
}

/// A Monte Carlo probability with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_count(hits: usize, samples: usize) -> Self {
        let p = hits as f64 / samples as f64;
        Self { value: p, stderr: (p * (1.0 - p) / samples as f64).sqrt(), samples }
    }

    pub fn complement(&self) -> Self {
        Self { value: 1.0 - self.value, ..*self }
    }
}

/// Draws of `(m + shift)ᵀ Σ' (m + shift)` with `m ~ N(0, I)`.
///
/// Sharded by sub-seed, so the output is identical for any thread count.
pub fn sample_quadratic_form(
    sigma_prime: &DMatrix<f64>,
    shift: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Vec<f64> {
    let n = shift.len();
    assert_eq!(sigma_prime.shape(), (n, n), "Σ' and shift dimensions differ");
    let shards = samples.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .flat_map_iter(|s| {
            let count = SHARD.min(samples - s * SHARD);
            let mut rng = rng::stream(rng::sub_seed(seed, s as u64), Stream::MonteCarlo);
            let mut y = DVector::zeros(n);
            (0..count)
                .map(|_| {
                    for i in 0..n {
                        let m: f64 = StandardNormal.sample(&mut rng);
                        y[i] = m + shift[i];
                    }
                    y.dot(&(sigma_prime * &y))
                })
                .collect::<Vec<f64>>()
        })
        .collect()
}

/// Monte Carlo CDF at `x` of a generalized chi-squared variable.
pub fn generalized_chi2_cdf_mc(
    sigma_prime: &DMatrix<f64>,
    shift: &DVector<f64>,
    x: f64,
    samples: usize,
    seed: u64,
) -> McEstimate {
    let draws = sample_quadratic_form(sigma_prime, shift, samples, seed);
    McEstimate::from_count(draws.iter().filter(|&&z| z <= x).count(), samples)
}

/// Empirical CDF over sorted draws.
pub fn empirical_cdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&z| z <= x) as f64 / sorted.len() as f64
}

/// Kolmogorov-Smirnov distance between draws and a continuous CDF.
pub fn ks_distance(draws: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = cdf(z);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
