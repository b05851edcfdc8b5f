use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{MechanismDesign, SynthesisProblem};
use crate::detector;
use crate::error::Result;
use crate::lifted;
use crate::linalg::{self, TOL_PD};
use crate::model::Check;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Closed-loop runs for the empirical false-alarm rate.
    pub runs: usize,
    pub seed: u64,
    pub cost_tol: f64,
    /// Allowed `tr(Σ_s - Σ_sy Σ_y⁻¹ Σ_syᵀ - Π)` relative to the trace of the posterior covariance.
    pub gap_tol: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { runs: 10_000, seed: 0, cost_tol: 1e-6, gap_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub recomputed_cost: f64,
    pub reported_cost: f64,
    pub constraint_margins: Vec<f64>,
    pub lmi_margin: f64,
    pub posterior_gap: f64,
    pub far_bound: f64,
    pub far_empirical: f64,
    pub far_stderr: f64,
    /// Gamma-approximated false-alarm rate averaged over the steps.
    pub far_analytic: f64,
    pub runs: usize,
    pub seed: u64,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, measured: f64, detail: String) -> Check {
    Check { name: name.into(), passed, measured, detail }
}

/// Re-derive every certificate of a design from scratch and Monte Carlo the
/// closed-loop false-alarm rate under the mechanism.
pub fn verify(design: &MechanismDesign, problem: &SynthesisProblem, opts: &VerifyOptions) -> Result<VerificationReport> {
    let model = &problem.model;
    let k = problem.horizon();
    let mut checks = Vec::new();

    let min_v = linalg::min_eigenvalue(&design.sigma_v);
    checks.push(check("Sigma_v_K positive semidefinite", min_v >= -TOL_PD, min_v, "smallest eigenvalue".into()));
    let min_j = linalg::min_eigenvalue(&design.sigma_j);
    checks.push(check("Sigma_j_K positive semidefinite", min_j >= -TOL_PD, min_j, "smallest eigenvalue".into()));
    let min_pi = linalg::min_eigenvalue(&design.pi);
    checks.push(check("Pi_K positive definite", min_pi > TOL_PD, min_pi, "smallest eigenvalue".into()));

    let lifted_sys = lifted::build_lifted(model, k)?;
    let inputs = vec![DVector::zeros(model.nu()); k - 1];
    let law = lifted::joint_law(&lifted_sys, model, &inputs, &design.sigma_v)?;
    let recomputed_cost = lifted::mutual_information(&law)? - lifted::gaussian_entropy(&design.sigma_j)?;
    let cost_err = (recomputed_cost - design.cost).abs();
    checks.push(check("cost reproduces", cost_err <= opts.cost_tol, cost_err, format!("recomputed {recomputed_cost}")));

    let lmi_margin = problem.lmi_margin(&design.sigma_v, &design.pi);
    checks.push(check("information LMI", lmi_margin >= -TOL_PD, lmi_margin, "smallest eigenvalue".into()));

    let posterior = law.schur_complement()?;
    let posterior_gap = (&posterior - &design.pi).trace();
    let gap_limit = opts.gap_tol * posterior.trace().max(1.0);
    checks.push(check(
        "Pi matches posterior covariance",
        posterior_gap.abs() <= gap_limit,
        posterior_gap,
        format!("limit {gap_limit:e}"),
    ));

    let constraint_margins = problem.constraint_margins(&design.sigma_v, &design.sigma_j)?;
    if let Some(worst) = constraint_margins.iter().copied().reduce(f64::min) {
        checks.push(check("detection constraints", worst >= 0.0, worst, format!("{} steps", constraint_margins.len())));
    }

    let far_analytic = (0..k)
        .map(|step| {
            let st = problem.distorted_cov_at(&design.sigma_v, &design.sigma_j, step)?;
            detector::false_alarm_rate_analytic(&st, &problem.design.sigma_r, problem.alpha)
        })
        .sum::<Result<f64>>()?
        / k as f64;
    let emp = detector::empirical_alarm_rate(
        model,
        &problem.design,
        &design.sigma_v,
        &design.sigma_j,
        &inputs,
        None,
        problem.alpha,
        opts.runs,
        opts.seed,
    )?;
    let far_bound = (problem.spec.target_far + problem.spec.epsilon).min(1.0);
    checks.push(check(
        "false-alarm bound",
        emp.rate <= far_bound + 3.0 * emp.stderr,
        emp.rate,
        format!("bound {far_bound}, stderr {:.2e}, {} runs", emp.stderr, opts.runs),
    ));

    Ok(VerificationReport {
        checks,
        recomputed_cost,
        reported_cost: design.cost,
        constraint_margins,
        lmi_margin,
        posterior_gap,
        far_bound,
        far_empirical: emp.rate,
        far_stderr: emp.stderr,
        far_analytic,
        runs: opts.runs,
        seed: opts.seed,
    })
}
