//! Optimal Gaussian privacy mechanism synthesis.
//!
//! Minimizes the leakage `I[s^K; ỹ^K] - h[j^{K-1}]` over the mechanism
//! covariances subject to a per-step cap on the distorted residual covariance,
//! `Σ̃_k ⪯ β* Σ_r`, that keeps the false-alarm rate below `𝒜* + ε`. With the
//! auxiliary `Π ⪯ Σ_s - Σ_sy Σ_y⁻¹ Σ_syᵀ` the program is a MAXDET problem in
//! `(Σ^v, Σ^j, Π)`.

mod barrier;
mod verify;

pub use barrier::{SolverOptions, StageRecord};
pub use verify::{verify, VerificationReport, VerifyOptions};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detector;
use crate::error::{Error, Result};
use crate::estimation::{self, KalmanDesign};
use crate::lifted::{self, LiftedSystem};
use crate::linalg::{self, rowmajor};
use crate::model::{self, SystemModel};
use crate::special;
use barrier::{Program, TermBuilder};

pub const DEFAULT_CAP: f64 = 1e4;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-8;
/// Default margin as a fraction of `‖Σ_r‖`.
pub const DEFAULT_MARGIN_SCALE: f64 = 1e-8;

/// `β* = α / (2 P⁻¹(n_y/2, 1 - 𝒜* - ε))`, or `None` when `𝒜* + ε ≥ 1` and the
/// detection constraint disappears.
pub fn beta_star(alpha: f64, target_far: f64, epsilon: f64, n_y: usize) -> Result<Option<f64>> {
    if !(alpha > 0.0) || !(target_far > 0.0 && target_far < 1.0) || !(epsilon >= 0.0) {
        return Err(Error::DomainError(format!("invalid (alpha, target_far, epsilon) = ({alpha}, {target_far}, {epsilon})")));
    }
    let p = 1.0 - target_far - epsilon;
    if p <= 0.0 {
        return Ok(None);
    }
    let q = special::inv_reg_lower_gamma(n_y as f64 / 2.0, p)?;
    Ok(Some(alpha / (2.0 * q)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Dense `Σ^v_K` and `Σ^j_K`: noise may be correlated across time.
    #[default]
    Full,
    /// Independent noise per step (block-diagonal covariances).
    BlockDiagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub horizon: usize,
    pub target_far: f64,
    pub epsilon: f64,
    pub structure: Structure,
    /// Slack on the per-step constraints; `None` uses `1e-8 ‖Σ_r‖`.
    pub margin: Option<f64>,
    /// Upper bound `Σ ⪯ cap·I` used only when the detection constraint is absent.
    pub cap: f64,
    pub sigma_min: f64,
}

impl ProblemSpec {
    pub fn new(horizon: usize, target_far: f64, epsilon: f64) -> Self {
        Self {
            horizon,
            target_far,
            epsilon,
            structure: Structure::Full,
            margin: None,
            cap: DEFAULT_CAP,
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }
}

/// A symmetric matrix variable stored as the lower triangle of each diagonal block.
#[derive(Debug, Clone)]
struct MatrixVar {
    offset: usize,
    dim: usize,
    block: usize,
    full: bool,
}

impl MatrixVar {
    fn new(offset: usize, dim: usize, block: usize, full: bool) -> Self {
        Self { offset, dim, block, full }
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        if self.full || self.block == 0 {
            vec![(0, self.dim)]
        } else {
            (0..self.dim / self.block).map(|k| (k * self.block, self.block)).collect()
        }
    }

    /// `(variable index, row, col)` with `row ≥ col`, in matrix coordinates.
    fn entries(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut idx = self.offset;
        for (start, size) in self.blocks() {
            for c in 0..size {
                for r in c..size {
                    out.push((idx, start + r, start + c));
                    idx += 1;
                }
            }
        }
        out
    }

    fn len(&self) -> usize {
        self.blocks().iter().map(|(_, s)| s * (s + 1) / 2).sum()
    }

    fn to_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, r, c) in self.entries() {
            m[(r, c)] = x[i];
            m[(c, r)] = x[i];
        }
        m
    }

    fn pack(&self, m: &DMatrix<f64>, x: &mut [f64]) {
        for (i, r, c) in self.entries() {
            x[i] = 0.5 * (m[(r, c)] + m[(c, r)]);
        }
    }

    /// Add `sign · X` (restricted to rows/cols `range`) at `offset` in `term`.
    fn place(&self, term: &mut TermBuilder, range: (usize, usize), at: usize, sign: f64) {
        let (start, size) = range;
        for (i, r, c) in self.entries() {
            if r < start || c < start || r >= start + size || c >= start + size {
                continue;
            }
            let (a, b) = (at + r - start, at + c - start);
            term.push(i, a, b, sign);
            if a != b {
                term.push(i, b, a, sign);
            }
        }
    }

    /// Add `sign · M X_range Mᵀ` at the origin of `term`.
    fn place_mapped(&self, term: &mut TermBuilder, range: (usize, usize), m: &DMatrix<f64>, sign: f64) {
        let (start, size) = range;
        for (i, r, c) in self.entries() {
            if r < start || c < start || r >= start + size || c >= start + size {
                continue;
            }
            let (ma, mb) = (m.column(r - start), m.column(c - start));
            let mut contrib = ma * mb.transpose();
            if r != c {
                contrib += mb * ma.transpose();
            }
            for p in 0..m.nrows() {
                for q in 0..m.nrows() {
                    term.push(i, p, q, sign * contrib[(p, q)]);
                }
            }
        }
    }
}

/// Assembled synthesis instance with every `Σ^v`-independent quantity precomputed.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    pub model: SystemModel,
    pub design: KalmanDesign,
    pub lifted: LiftedSystem,
    pub spec: ProblemSpec,
    pub alpha: f64,
    pub beta_star: Option<f64>,
    pub margin: f64,
    pub sigma_s: DMatrix<f64>,
    pub sigma_sy: DMatrix<f64>,
    pub sigma_y0: DMatrix<f64>,
    /// `C L`
    pub cl: DMatrix<f64>,
    /// `C B`
    pub cb: DMatrix<f64>,
}

impl SynthesisProblem {
    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    /// Number of per-step detection constraints (0 when unconstrained).
    pub fn per_step_constraints(&self) -> usize {
        if self.beta_star.is_some() {
            self.horizon()
        } else {
            0
        }
    }

    fn layout(&self) -> (MatrixVar, MatrixVar, MatrixVar) {
        let (k, ny, nu, ns) = (self.horizon(), self.model.ny(), self.model.nu(), self.model.ns());
        let full = self.spec.structure == Structure::Full;
        let v = MatrixVar::new(0, k * ny, ny, full);
        let j = MatrixVar::new(v.len(), (k - 1) * nu, nu, full);
        let p = MatrixVar::new(v.len() + j.len(), k * ns, ns, true);
        (v, j, p)
    }

    pub fn variable_count(&self) -> usize {
        let (v, j, p) = self.layout();
        v.len() + j.len() + p.len()
    }

    /// `Σ̃_k` from the `k`-th diagonal blocks (0-based; the last step carries no input noise).
    pub fn distorted_cov_at(&self, sigma_v: &DMatrix<f64>, sigma_j: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
        let (ny, nu) = (self.model.ny(), self.model.nu());
        let v_k = linalg::diag_block(sigma_v, k, ny);
        let j_k = if k + 1 < self.horizon() { linalg::diag_block(sigma_j, k, nu) } else { DMatrix::zeros(nu, nu) };
        estimation::distorted_residual_cov(&self.design, &self.model, &v_k, &j_k)
    }

    /// `λ_min(β* Σ_r - Σ̃_k)` for each step, empty when unconstrained.
    pub fn constraint_margins(&self, sigma_v: &DMatrix<f64>, sigma_j: &DMatrix<f64>) -> Result<Vec<f64>> {
        let Some(beta) = self.beta_star else { return Ok(Vec::new()) };
        (0..self.horizon())
            .map(|k| Ok(linalg::min_eigenvalue(&(&self.design.sigma_r * beta - self.distorted_cov_at(sigma_v, sigma_j, k)?))))
            .collect()
    }

    /// Smallest eigenvalue of `[[Σ_s - Π, Σ_sy], [Σ_syᵀ, Σ_y0 + Σ^v]]`.
    pub fn lmi_margin(&self, sigma_v: &DMatrix<f64>, pi: &DMatrix<f64>) -> f64 {
        let (ks, ky) = (self.sigma_s.nrows(), self.sigma_y0.nrows());
        let mut m = DMatrix::zeros(ks + ky, ks + ky);
        m.view_mut((0, 0), (ks, ks)).copy_from(&(&self.sigma_s - pi));
        m.view_mut((0, ks), (ks, ky)).copy_from(&self.sigma_sy);
        m.view_mut((ks, 0), (ky, ks)).copy_from(&self.sigma_sy.transpose());
        m.view_mut((ks, ks), (ky, ky)).copy_from(&(&self.sigma_y0 + sigma_v));
        linalg::min_eigenvalue(&m)
    }

    /// Exact leakage `I[s; ỹ] - h[j]` of a mechanism.
    pub fn cost(&self, sigma_v: &DMatrix<f64>, sigma_j: &DMatrix<f64>) -> Result<f64> {
        let inputs = vec![DVector::zeros(self.model.nu()); self.horizon() - 1];
        let law = lifted::joint_law(&self.lifted, &self.model, &inputs, sigma_v)?;
        lifted::leakage_cost(&law, sigma_j)
    }

    fn program(&self) -> Program {
        let (v, j, p) = self.layout();
        let (k, ny, nu) = (self.horizon(), self.model.ny(), self.model.nu());
        let (ks, ky) = (self.sigma_s.nrows(), self.sigma_y0.nrows());
        let sigma_min = self.spec.sigma_min;
        let mut terms = Vec::new();

        // Π ≻ 0, carrying the -log det Π objective
        let mut t = TermBuilder::new("Pi", DMatrix::zeros(ks, ks)).objective(1.0, true);
        p.place(&mut t, (0, ks), 0, 1.0);
        terms.push(t.build());

        if j.dim > 0 {
            let mut t = TermBuilder::new("Sigma_j objective", DMatrix::zeros(j.dim, j.dim)).objective(1.0, false);
            j.place(&mut t, (0, j.dim), 0, 1.0);
            terms.push(t.build());
            let mut t = TermBuilder::new("Sigma_j lower bound", DMatrix::identity(j.dim, j.dim) * -sigma_min);
            j.place(&mut t, (0, j.dim), 0, 1.0);
            terms.push(t.build());
        }

        let mut t = TermBuilder::new("Sigma_v lower bound", DMatrix::identity(ky, ky) * -sigma_min);
        v.place(&mut t, (0, ky), 0, 1.0);
        terms.push(t.build());

        let mut f0 = DMatrix::zeros(ks + ky, ks + ky);
        f0.view_mut((0, 0), (ks, ks)).copy_from(&self.sigma_s);
        f0.view_mut((0, ks), (ks, ky)).copy_from(&self.sigma_sy);
        f0.view_mut((ks, 0), (ky, ks)).copy_from(&self.sigma_sy.transpose());
        f0.view_mut((ks, ks), (ky, ky)).copy_from(&self.sigma_y0);
        let mut t = TermBuilder::new("information LMI", f0);
        p.place(&mut t, (0, ks), 0, -1.0);
        v.place(&mut t, (0, ky), ks, 1.0);
        terms.push(t.build());

        match self.beta_star {
            Some(beta) => {
                let base = &self.design.sigma_r * (beta - 1.0) - DMatrix::identity(ny, ny) * self.margin;
                let eye = DMatrix::identity(ny, ny);
                for step in 0..k {
                    let mut t = TermBuilder::new(format!("detection constraint {}", step + 1), base.clone());
                    v.place_mapped(&mut t, (step * ny, ny), &eye, -1.0);
                    v.place_mapped(&mut t, (step * ny, ny), &self.cl, -1.0);
                    if step + 1 < k {
                        j.place_mapped(&mut t, (step * nu, nu), &self.cb, -1.0);
                    }
                    terms.push(t.build());
                }
            }
            None => {
                let cap = self.spec.cap;
                let mut t = TermBuilder::new("Sigma_v cap", DMatrix::identity(ky, ky) * cap);
                v.place(&mut t, (0, ky), 0, -1.0);
                terms.push(t.build());
                if j.dim > 0 {
                    let mut t = TermBuilder::new("Sigma_j cap", DMatrix::identity(j.dim, j.dim) * cap);
                    j.place(&mut t, (0, j.dim), 0, -1.0);
                    terms.push(t.build());
                }
            }
        }
        Program { n: v.len() + j.len() + p.len(), terms }
    }

    /// Strictly feasible start: a scaled `Σ_r` per step for `Σ^v`, a multiple of
    /// the identity for `Σ^j`, and `Π` at half the posterior covariance.
    fn initial_point(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (k, ny, nu) = (self.horizon(), self.model.ny(), self.model.nu());
        let (sigma_v, sigma_j) = match self.beta_star {
            Some(beta) => {
                let sr = &self.design.sigma_r;
                let w = linalg::sym_inv_sqrt(sr, "Sigma_r")?;
                let rho = linalg::max_eigenvalue(&(&w * (sr + &self.cl * sr * self.cl.transpose()) * &w));
                let c = (beta - 1.0) / (2.0 * rho);
                let rho_j = linalg::max_eigenvalue(&(&w * &self.cb * self.cb.transpose() * &w));
                let s = if rho_j > 0.0 { (beta - 1.0) / (4.0 * rho_j) } else { 1.0 };
                let s = s.min(self.spec.cap);
                (linalg::kron(&DMatrix::identity(k, k), &(sr * c)), DMatrix::identity((k - 1) * nu, (k - 1) * nu) * s)
            }
            None => {
                let s = (self.spec.cap / 2.0).min(1.0);
                (DMatrix::identity(k * ny, k * ny) * s, DMatrix::identity((k - 1) * nu, (k - 1) * nu) * s)
            }
        };
        let inputs = vec![DVector::zeros(nu); k - 1];
        let law = lifted::joint_law(&self.lifted, &self.model, &inputs, &sigma_v)?;
        let pi = law.schur_complement()? * 0.5;
        Ok((sigma_v, sigma_j, pi))
    }
}

/// Validate the model, design the Kalman filter, lift the dynamics and derive `β*`.
pub fn assemble(model: &SystemModel, spec: &ProblemSpec) -> Result<SynthesisProblem> {
    if spec.horizon < 1 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if !(spec.cap > 0.0) || !(spec.sigma_min > 0.0) {
        return Err(Error::Config("cap and sigma_min must be positive".into()));
    }
    let report = model::validate_model(model)?;
    if !report.all_passed() {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Error::Config(format!("model assumptions violated: {}", failed.join(", "))));
    }
    let design = estimation::solve_dare(model)?;
    let lifted = lifted::build_lifted(model, spec.horizon)?;
    let n_y = model.ny();
    let alpha = detector::threshold_alpha(spec.target_far, n_y)?;
    let beta = beta_star(alpha, spec.target_far, spec.epsilon, n_y)?;
    let margin = spec.margin.unwrap_or(DEFAULT_MARGIN_SCALE * design.sigma_r.norm());
    let cl = &model.c * &design.l;
    let cb = &model.c * &model.b;

    if let Some(beta) = beta {
        // room for the margin and for the σ_min floor on every variable
        let floor = margin
            + spec.sigma_min * linalg::max_eigenvalue(&(DMatrix::identity(n_y, n_y) + &cl * cl.transpose()))
            + spec.sigma_min * linalg::max_eigenvalue(&(&cb * cb.transpose()));
        let room = (beta - 1.0) * linalg::min_eigenvalue(&design.sigma_r);
        if room <= floor {
            return Err(Error::InfeasibleConfig(format!(
                "beta* = {beta} leaves no room for distortion (epsilon = {})",
                spec.epsilon
            )));
        }
    }

    Ok(SynthesisProblem {
        sigma_s: lifted.sigma_s(),
        sigma_sy: lifted.sigma_sy(),
        sigma_y0: lifted.sigma_y0(model),
        model: model.clone(),
        design,
        lifted,
        spec: spec.clone(),
        alpha,
        beta_star: beta,
        margin,
        cl,
        cb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismDesign {
    #[serde(rename = "Sigma_v_K", with = "rowmajor")]
    pub sigma_v: DMatrix<f64>,
    #[serde(rename = "Sigma_j_K", with = "rowmajor")]
    pub sigma_j: DMatrix<f64>,
    #[serde(rename = "Pi_K", with = "rowmajor")]
    pub pi: DMatrix<f64>,
    /// Exact leakage `I[s; ỹ] - h[j]` in nats.
    pub cost: f64,
    /// Mutual-information part of the cost.
    pub mutual_information: f64,
    /// Solver objective `-log det Π - log det Σ^j`.
    pub objective: f64,
    /// `λ_min(β* Σ_r - Σ̃_k)` per step; empty when unconstrained.
    pub constraint_margins: Vec<f64>,
    pub lmi_margin: f64,
    pub iterations: usize,
    pub stages: Vec<StageRecord>,
    pub solve_status: SolveStatus,
    pub horizon: usize,
    pub target_far: f64,
    pub epsilon: f64,
    pub alpha: f64,
    /// `null` when the detection constraint is absent.
    pub beta_star: Option<f64>,
    pub structure: Structure,
    pub margin: f64,
    pub sigma_min: f64,
    /// Applied only when `beta_star` is absent.
    pub cap: Option<f64>,
    pub final_mu: f64,
}

impl MechanismDesign {
    pub fn min_margin(&self) -> Option<f64> {
        self.constraint_margins.iter().copied().reduce(f64::min)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-step diagonal blocks `(Σ^v_k, Σ^j_k)`; the last step has no input block.
    pub fn step_blocks(&self, ny: usize, nu: usize) -> Vec<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        (0..self.horizon)
            .map(|k| {
                let j = (k + 1 < self.horizon).then(|| linalg::diag_block(&self.sigma_j, k, nu));
                (linalg::diag_block(&self.sigma_v, k, ny), j)
            })
            .collect()
    }
}

/// Solve the synthesis program with the barrier method.
pub fn solve(problem: &SynthesisProblem, opts: &SolverOptions) -> Result<MechanismDesign> {
    let program = problem.program();
    let (v, j, p) = problem.layout();
    let (sv0, sj0, pi0) = problem.initial_point()?;
    let mut x0 = vec![0.0; program.n];
    v.pack(&sv0, &mut x0);
    j.pack(&sj0, &mut x0);
    p.pack(&pi0, &mut x0);
    let result = program.minimize(x0, opts)?;

    let sigma_v = v.to_matrix(&result.x);
    let sigma_j = j.to_matrix(&result.x);
    let pi = p.to_matrix(&result.x);
    let inputs = vec![DVector::zeros(problem.model.nu()); problem.horizon() - 1];
    let law = lifted::joint_law(&problem.lifted, &problem.model, &inputs, &sigma_v)?;
    let mi = lifted::mutual_information(&law)?;
    let cost = mi - lifted::gaussian_entropy(&sigma_j)?;
    Ok(MechanismDesign {
        constraint_margins: problem.constraint_margins(&sigma_v, &sigma_j)?,
        lmi_margin: problem.lmi_margin(&sigma_v, &pi),
        objective: program.objective(&result.x).expect("solution is feasible"),
        sigma_v,
        sigma_j,
        pi,
        cost,
        mutual_information: mi,
        iterations: result.newton_steps,
        stages: result.stages,
        solve_status: SolveStatus::Converged,
        horizon: problem.horizon(),
        target_far: problem.spec.target_far,
        epsilon: problem.spec.epsilon,
        alpha: problem.alpha,
        beta_star: problem.beta_star,
        structure: problem.spec.structure,
        margin: problem.margin,
        sigma_min: problem.spec.sigma_min,
        cap: problem.beta_star.is_none().then_some(problem.spec.cap),
        final_mu: result.final_mu,
    })
}

/// `assemble` followed by `solve`.
pub fn synthesize(model: &SystemModel, spec: &ProblemSpec, opts: &SolverOptions) -> Result<MechanismDesign> {
    solve(&assemble(model, spec)?, opts)
}
