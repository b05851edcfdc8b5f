//! Chi-squared detector, threshold design and its false-alarm / detection metrics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{run_remote_filter, KalmanDesign, ResidualSequence};
use crate::linalg;
use crate::model::{MechanismSampler, Simulator, SystemModel};
use crate::rng;
use crate::special::{self, McEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub target_far: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub n_y: usize,
}

impl DetectorConfig {
    pub fn new(target_far: f64, epsilon: f64, n_y: usize) -> Result<Self> {
        if !(epsilon >= 0.0) || target_far + epsilon > 1.0 {
            return Err(Error::Config(format!("distortion level {epsilon} outside [0, 1 - {target_far}]")));
        }
        Ok(Self { target_far, epsilon, alpha: threshold_alpha(target_far, n_y)?, n_y })
    }
}

/// `α = 2 P⁻¹(n_y / 2, 1 - 𝒜*)`: nominal `z_k ~ χ²_{n_y}` exceed it with probability `𝒜*`.
pub fn threshold_alpha(target_far: f64, n_y: usize) -> Result<f64> {
    if !(target_far > 0.0 && target_far < 1.0) {
        return Err(Error::DomainError(format!("target false-alarm rate {target_far} must lie in (0, 1)")));
    }
    if n_y == 0 {
        return Err(Error::DomainError("detector needs at least one output".into()));
    }
    Ok(2.0 * special::inv_reg_lower_gamma(n_y as f64 / 2.0, 1.0 - target_far)?)
}

/// 1-based time steps `k` with `z_k > α`.
pub fn run_detector(residuals: &ResidualSequence, config: &DetectorConfig) -> Vec<usize> {
    alarms(&residuals.distances, config.alpha)
}

pub fn alarms(distances: &[f64], alpha: f64) -> Vec<usize> {
    distances.iter().enumerate().filter(|(_, &z)| z > alpha).map(|(k, _)| k + 1).collect()
}

/// Spectrum of `Σ_r^{-1/2} Σ̃ Σ_r^{-1/2}`, the weights of `z̃` as a sum of `χ²_1` terms.
pub fn distortion_eigenvalues(sigma_tilde: &DMatrix<f64>, sigma_r: &DMatrix<f64>) -> Result<Vec<f64>> {
    if linalg::min_eigenvalue(sigma_tilde) <= linalg::TOL_PD {
        return Err(Error::NotPd { name: "Sigma_tilde".into() });
    }
    let w = linalg::sym_inv_sqrt(sigma_r, "Sigma_r")?;
    Ok(linalg::sym_eigenvalues(&(&w * sigma_tilde * &w)))
}

/// Gamma-approximated probability that the distorted `z̃` exceeds `α`.
pub fn false_alarm_rate_analytic(sigma_tilde: &DMatrix<f64>, sigma_r: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let fit = special::ws_gamma_fit(&distortion_eigenvalues(sigma_tilde, sigma_r)?)?;
    Ok(fit.sf(alpha))
}

/// Non-centrality `‖Σ_r^{-1/2} r^δ‖²` of the faulty nominal residual.
pub fn noncentrality(fault_residual_mean: &DVector<f64>, sigma_r: &DMatrix<f64>) -> Result<f64> {
    let w = linalg::sym_inv_sqrt(sigma_r, "Sigma_r")?;
    Ok((w * fault_residual_mean).norm_squared())
}

pub fn detection_rate_no_privacy(fault_residual_mean: &DVector<f64>, sigma_r: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let lambda = noncentrality(fault_residual_mean, sigma_r)?;
    Ok(1.0 - special::noncentral_chi2_cdf(sigma_r.nrows(), lambda, alpha))
}

/// `z̃ = (m + s)ᵀ Σ' (m + s)` with `Σ' = Σ̃^{1/2} Σ_r⁻¹ Σ̃^{1/2}` and `s = Σ̃^{-1/2} r^δ`.
pub fn distorted_quadratic_form(
    fault_residual_mean: &DVector<f64>,
    sigma_tilde: &DMatrix<f64>,
    sigma_r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let root = linalg::sym_sqrt(sigma_tilde);
    let inv_root = linalg::sym_inv_sqrt(sigma_tilde, "Sigma_tilde")?;
    let r_inv = linalg::spd_solve(sigma_r, &root, "Sigma_r")?;
    Ok((linalg::symmetrize(&(&root * r_inv)), inv_root * fault_residual_mean))
}

pub fn detection_rate_with_privacy(
    fault_residual_mean: &DVector<f64>,
    sigma_tilde: &DMatrix<f64>,
    sigma_r: &DMatrix<f64>,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let (sigma_prime, shift) = distorted_quadratic_form(fault_residual_mean, sigma_tilde, sigma_r)?;
    Ok(special::generalized_chi2_cdf_mc(&sigma_prime, &shift, alpha, samples, seed).complement())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub target_far: f64,
    pub alpha: f64,
    pub far: f64,
    pub det_rate: f64,
    pub far_stderr: f64,
    pub det_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area with the `(0, 0)` and `(1, 1)` end points added.
    pub fn auc(&self) -> f64 {
        let (f, d) = self.padded();
        (1..f.len()).map(|i| (f[i] - f[i - 1]) * (d[i] + d[i - 1]) / 2.0).sum()
    }

    /// First-order bound on the Monte Carlo error of [`auc`](Self::auc), taking
    /// the errors of all points as fully correlated.
    pub fn auc_stderr(&self) -> f64 {
        let (f, d) = self.padded();
        self.points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let i = i + 1;
                let w_d = 0.5 * (f[i + 1] - f[i - 1]);
                let w_f = 0.5 * (d[i - 1] - d[i + 1]);
                w_d.abs() * p.det_stderr + w_f.abs() * p.far_stderr
            })
            .sum()
    }

    fn padded(&self) -> (Vec<f64>, Vec<f64>) {
        let mut f = vec![0.0];
        let mut d = vec![0.0];
        f.extend(self.points.iter().map(|p| p.far));
        d.extend(self.points.iter().map(|p| p.det_rate));
        f.push(1.0);
        d.push(1.0);
        (f, d)
    }
}

fn check_grid(far_grid: &[f64]) -> Result<()> {
    if far_grid.is_empty() || far_grid.windows(2).any(|w| w[1] <= w[0]) || far_grid.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Config("false-alarm grid must be strictly increasing inside (0, 1)".into()));
    }
    Ok(())
}

/// ROC of the distorted detector. Both coordinates are Monte Carlo estimates
/// over the same standard-normal draws, so `r^δ = 0` gives the exact diagonal.
pub fn roc_curve(
    fault_residual_mean: &DVector<f64>,
    sigma_tilde: &DMatrix<f64>,
    sigma_r: &DMatrix<f64>,
    far_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<RocCurve> {
    check_grid(far_grid)?;
    let n_y = sigma_r.nrows();
    let (sigma_prime, shift) = distorted_quadratic_form(fault_residual_mean, sigma_tilde, sigma_r)?;
    let mut null = special::sample_quadratic_form(&sigma_prime, &DVector::zeros(n_y), samples, seed);
    let mut faulty = special::sample_quadratic_form(&sigma_prime, &shift, samples, seed);
    null.par_sort_unstable_by(|a, b| a.total_cmp(b));
    faulty.par_sort_unstable_by(|a, b| a.total_cmp(b));
    let exceed = |sorted: &[f64], alpha: f64| McEstimate::from_count(sorted.len() - sorted.partition_point(|&z| z <= alpha), sorted.len());
    let points = far_grid
        .iter()
        .map(|&target| {
            let alpha = threshold_alpha(target, n_y)?;
            let far = exceed(&null, alpha);
            let det = exceed(&faulty, alpha);
            Ok(RocPoint { target_far: target, alpha, far: far.value, det_rate: det.value, far_stderr: far.stderr, det_stderr: det.stderr })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RocCurve { points })
}

/// Exact ROC of the undistorted detector (non-central chi-squared).
pub fn roc_curve_no_privacy(fault_residual_mean: &DVector<f64>, sigma_r: &DMatrix<f64>, far_grid: &[f64]) -> Result<RocCurve> {
    check_grid(far_grid)?;
    let n_y = sigma_r.nrows();
    let points = far_grid
        .iter()
        .map(|&target| {
            let alpha = threshold_alpha(target, n_y)?;
            Ok(RocPoint {
                target_far: target,
                alpha,
                far: target,
                det_rate: detection_rate_no_privacy(fault_residual_mean, sigma_r, alpha)?,
                far_stderr: 0.0,
                det_stderr: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RocCurve { points })
}

/// Closed-loop alarm statistics from simulated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalAlarmRate {
    /// Alarm fraction over all runs and steps.
    pub rate: f64,
    /// Standard error from the spread of per-run alarm fractions.
    pub stderr: f64,
    /// Alarm fraction at each step `k = 1..K`.
    pub per_step: Vec<f64>,
    pub runs: usize,
}

/// Simulate the plant, distort the disclosed data, run the remote filter on
/// `(ỹ, ũ)` and count `z̃_k > α`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_alarm_rate(
    model: &SystemModel,
    design: &KalmanDesign,
    sigma_v: &DMatrix<f64>,
    sigma_j: &DMatrix<f64>,
    inputs: &[DVector<f64>],
    faults: Option<&[DVector<f64>]>,
    alpha: f64,
    runs: usize,
    seed: u64,
) -> Result<EmpiricalAlarmRate> {
    let horizon = inputs.len() + 1;
    let sim = Simulator::new(model)?;
    let sampler = MechanismSampler::new(sigma_v, sigma_j)?;
    let per_run: Vec<Vec<bool>> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let run_seed = rng::sub_seed(seed, i as u64);
            let traj = sim.run(horizon, inputs, faults, run_seed)?;
            let dist = sampler.apply(&traj, run_seed)?;
            let res = run_remote_filter(model, design, &dist.y_tilde, &dist.u_tilde)?;
            Ok(res.distances.iter().map(|&z| z > alpha).collect())
        })
        .collect::<Result<_>>()?;
    let mut per_step = vec![0.0; horizon];
    let fractions: Vec<f64> = per_run
        .iter()
        .map(|flags| {
            for (k, &f) in flags.iter().enumerate() {
                per_step[k] += f as u8 as f64;
            }
            flags.iter().filter(|&&f| f).count() as f64 / horizon as f64
        })
        .collect();
    per_step.iter_mut().for_each(|c| *c /= runs as f64);
    let n = runs as f64;
    let rate = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - rate).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(EmpiricalAlarmRate { rate, stderr: (var / n).sqrt(), per_step, runs })
}
