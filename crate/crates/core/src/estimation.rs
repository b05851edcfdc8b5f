//! Steady-state Kalman filter, residual generation and the linear MMSE adversary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, rowmajor};
use crate::model::SystemModel;

pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;

/// Steady-state predictor-form Kalman filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanDesign {
    /// Asymptotic one-step prediction error covariance.
    #[serde(rename = "P", with = "rowmajor")]
    pub p: DMatrix<f64>,
    #[serde(rename = "L", with = "rowmajor")]
    pub l: DMatrix<f64>,
    /// Nominal residual covariance `C P Cᵀ + Σ^w`.
    #[serde(rename = "Sigma_r", with = "rowmajor")]
    pub sigma_r: DMatrix<f64>,
    #[serde(skip)]
    pub iterations: usize,
}

fn riccati_map(model: &SystemModel, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, c) = (&model.a, &model.c);
    let s = &model.sigma_w + c * p * c.transpose();
    let apc = a * p * c.transpose();
    let gain_t = linalg::cholesky(&s, "Sigma_w + C P C^T")?.solve(&apc.transpose());
    Ok(linalg::symmetrize(&(a * p * a.transpose() + &model.sigma_t - apc * gain_t)))
}

/// Frobenius norm of `RiccatiMap(P) - P`.
pub fn riccati_residual(model: &SystemModel, p: &DMatrix<f64>) -> Result<f64> {
    Ok((riccati_map(model, p)? - p).norm())
}

/// Fixed-point iteration of the filtering Riccati equation, started at `Σ^t`.
pub fn solve_dare(model: &SystemModel) -> Result<KalmanDesign> {
    model.check_dimensions()?;
    let mut p = model.sigma_t.clone();
    for it in 1..=DARE_MAX_ITER {
        let next = riccati_map(model, &p)?;
        let diff = (&next - &p).norm();
        let scale = next.norm();
        p = next;
        if diff <= DARE_TOL * scale || diff == 0.0 {
            return Ok(design_from_p(model, p, it));
        }
        if !diff.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence { iterations: DARE_MAX_ITER })
}

fn design_from_p(model: &SystemModel, p: DMatrix<f64>, iterations: usize) -> KalmanDesign {
    let c = &model.c;
    let sigma_r = linalg::symmetrize(&(c * &p * c.transpose() + &model.sigma_w));
    let apc = &model.a * &p * c.transpose();
    let l = linalg::cholesky(&sigma_r, "Sigma_r")
        .expect("residual covariance is positive definite")
        .solve(&apc.transpose())
        .transpose();
    KalmanDesign { p, l, sigma_r, iterations }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSequence {
    pub residuals: Vec<DVector<f64>>,
    /// `z_k = r_kᵀ Σ_r⁻¹ r_k`
    pub distances: Vec<f64>,
}

impl ResidualSequence {
    pub fn horizon(&self) -> usize {
        self.residuals.len()
    }
}

/// Remote filter `x̂_{k+1} = A x̂_k + B u_k + L (y_k - C x̂_k)` from `x̂_1 = μ^x_1`.
///
/// Pass `(ỹ, ũ)` to obtain the distorted residuals; the distances stay
/// normalized by the nominal `Σ_r`.
pub fn run_remote_filter(
    model: &SystemModel,
    design: &KalmanDesign,
    measurements: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<ResidualSequence> {
    let horizon = measurements.len();
    if horizon > 0 && inputs.len() + 1 < horizon {
        return Err(Error::HorizonMismatch(format!("{} inputs for {horizon} measurements", inputs.len())));
    }
    if measurements.iter().any(|y| y.len() != model.ny()) || inputs.iter().any(|u| u.len() != model.nu()) {
        return Err(Error::DimensionMismatch("measurement or input length differs from the model".into()));
    }
    let chol = linalg::cholesky(&design.sigma_r, "Sigma_r")?;
    let mut xhat = model.mu_x1.clone();
    let mut residuals = Vec::with_capacity(horizon);
    let mut distances = Vec::with_capacity(horizon);
    for (k, y) in measurements.iter().enumerate() {
        let r = y - &model.c * &xhat;
        distances.push(r.dot(&chol.solve(&r)).max(0.0));
        if k + 1 < horizon {
            xhat = &model.a * &xhat + &model.b * &inputs[k] + &design.l * &r;
        }
        residuals.push(r);
    }
    Ok(ResidualSequence { residuals, distances })
}

/// `Σ̃_k = Σ_r + Σ^v_k + C L Σ^v_k Lᵀ Cᵀ + C B Σ^j_k Bᵀ Cᵀ`.
pub fn distorted_residual_cov(
    design: &KalmanDesign,
    model: &SystemModel,
    sigma_v_k: &DMatrix<f64>,
    sigma_j_k: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if sigma_v_k.shape() != (model.ny(), model.ny()) || sigma_j_k.shape() != (model.nu(), model.nu()) {
        return Err(Error::DimensionMismatch("per-step mechanism blocks have the wrong size".into()));
    }
    linalg::check_psd(sigma_v_k, "Sigma_v_k")?;
    linalg::check_psd(sigma_j_k, "Sigma_j_k")?;
    let cl = &model.c * &design.l;
    let cb = &model.c * &model.b;
    Ok(linalg::symmetrize(
        &(&design.sigma_r + sigma_v_k + &cl * sigma_v_k * cl.transpose() + &cb * sigma_j_k * cb.transpose()),
    ))
}

/// Steady-state residual shift caused by a constant fault `δ`, from the
/// noise-free recursion `e_{k+1} = (A - LC) e_k + (G - LH) δ`, `r_k = C e_k + H δ`.
pub fn fault_residual_mean(model: &SystemModel, design: &KalmanDesign, delta: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.nx();
    let closed = DMatrix::identity(n, n) - (&model.a - &design.l * &model.c);
    let forcing = (&model.g - &design.l * &model.h) * delta;
    let e = closed
        .lu()
        .solve(&forcing)
        .ok_or_else(|| Error::SingularCovariance { name: "I - (A - LC)".into(), cond: f64::INFINITY })?;
    Ok(&model.c * e + &model.h * delta)
}

/// Transient residual shifts `r^δ_1 .. r^δ_K` for a fault sequence, with `e_1 = 0`.
pub fn fault_residual_transient(model: &SystemModel, design: &KalmanDesign, faults: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let closed = &model.a - &design.l * &model.c;
    let forcing = &model.g - &design.l * &model.h;
    let mut e = DVector::zeros(model.nx());
    faults
        .iter()
        .map(|d| {
            let r = &model.c * &e + &model.h * d;
            e = &closed * &e + &forcing * d;
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmseEstimate {
    pub s_hat: DVector<f64>,
    pub error_cov: DMatrix<f64>,
    pub mse: f64,
}

/// Linear MMSE estimate of `s` from an observed `y`, for jointly Gaussian `(s, y)`.
pub fn mmse_estimate(
    mean_s: &DVector<f64>,
    mean_y: &DVector<f64>,
    sigma_s: &DMatrix<f64>,
    sigma_sy: &DMatrix<f64>,
    sigma_y: &DMatrix<f64>,
    observed_y: &DVector<f64>,
) -> Result<MmseEstimate> {
    MmseEstimator::new(mean_s, mean_y, sigma_s, sigma_sy, sigma_y)?.estimate(observed_y)
}

/// MMSE estimator with the gain `Σ_sy Σ_y⁻¹` precomputed, for repeated use.
#[derive(Debug, Clone)]
pub struct MmseEstimator {
    mean_s: DVector<f64>,
    mean_y: DVector<f64>,
    gain: DMatrix<f64>,
    error_cov: DMatrix<f64>,
}

impl MmseEstimator {
    pub fn new(
        mean_s: &DVector<f64>,
        mean_y: &DVector<f64>,
        sigma_s: &DMatrix<f64>,
        sigma_sy: &DMatrix<f64>,
        sigma_y: &DMatrix<f64>,
    ) -> Result<Self> {
        let (ns, ny) = (mean_s.len(), mean_y.len());
        if sigma_s.shape() != (ns, ns) || sigma_sy.shape() != (ns, ny) || sigma_y.shape() != (ny, ny) {
            return Err(Error::DimensionMismatch("joint covariance blocks disagree with the means".into()));
        }
        let gain = linalg::spd_solve(sigma_y, &sigma_sy.transpose(), "Sigma_y")?.transpose();
        let error_cov = linalg::symmetrize(&(sigma_s - &gain * sigma_sy.transpose()));
        Ok(Self { mean_s: mean_s.clone(), mean_y: mean_y.clone(), gain, error_cov })
    }

    pub fn s_hat(&self, observed_y: &DVector<f64>) -> DVector<f64> {
        &self.mean_s + &self.gain * (observed_y - &self.mean_y)
    }

    pub fn error_cov(&self) -> &DMatrix<f64> {
        &self.error_cov
    }

    pub fn estimate(&self, observed_y: &DVector<f64>) -> Result<MmseEstimate> {
        if observed_y.len() != self.mean_y.len() {
            return Err(Error::DimensionMismatch("observation length differs from mean_y".into()));
        }
        Ok(MmseEstimate { s_hat: self.s_hat(observed_y), error_cov: self.error_cov.clone(), mse: self.error_cov.trace() })
    }
}
