//! Plant model, trajectory simulation and the additive Gaussian privacy mechanism.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, rowmajor, TOL_PD, TOL_RANK};
use crate::rng::{self, Stream};

const REACTOR_JSON: &str = include_str!("../data/reactor.json");

/// Linear stochastic plant
///
/// ```text
/// x_{k+1} = A x_k + B u_k + t_k + G δ_k
/// y_k     = C x_k + w_k + H δ_k
/// s_k     = D x_k
/// ```
///
/// with `t ~ N(0, Σ^t)`, `w ~ N(0, Σ^w)` and `x_1 ~ N(μ^x_1, Σ^x_1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    #[serde(rename = "A", with = "rowmajor")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "rowmajor")]
    pub b: DMatrix<f64>,
    #[serde(rename = "C", with = "rowmajor")]
    pub c: DMatrix<f64>,
    #[serde(rename = "D", with = "rowmajor")]
    pub d: DMatrix<f64>,
    #[serde(rename = "G", with = "rowmajor")]
    pub g: DMatrix<f64>,
    #[serde(rename = "H", with = "rowmajor")]
    pub h: DMatrix<f64>,
    #[serde(rename = "Sigma_t", with = "rowmajor")]
    pub sigma_t: DMatrix<f64>,
    #[serde(rename = "Sigma_w", with = "rowmajor")]
    pub sigma_w: DMatrix<f64>,
    #[serde(rename = "mu_x1", with = "rowmajor::vector")]
    pub mu_x1: DVector<f64>,
    #[serde(rename = "Sigma_x1", with = "rowmajor")]
    pub sigma_x1: DMatrix<f64>,
}

impl SystemModel {
    /// Well-stirred chemical reactor with heat exchanger (4 states, 2 outputs,
    /// 1 input, private output = product concentration).
    pub fn reactor() -> Self {
        Self::from_json(REACTOR_JSON).expect("bundled reactor model parses")
    }

    /// Reference input `u_k = 50 cos(0.5 k)^2` for `k = 1..K-1`.
    pub fn reactor_inputs(horizon: usize) -> Vec<DVector<f64>> {
        (1..horizon)
            .map(|k| DVector::from_element(1, 50.0 * (0.5 * k as f64).cos().powi(2)))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: SystemModel = serde_json::from_str(text)?;
        model.check_dimensions()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
    pub fn ny(&self) -> usize {
        self.c.nrows()
    }
    pub fn ns(&self) -> usize {
        self.d.nrows()
    }
    pub fn n_delta(&self) -> usize {
        self.g.ncols()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let nx = self.a.nrows();
        let ny = self.c.nrows();
        let mismatch = |what: &str| Err(Error::DimensionMismatch(what.to_string()));
        if self.a.ncols() != nx {
            return mismatch("A must be square");
        }
        if self.b.nrows() != nx {
            return mismatch("B must have n_x rows");
        }
        if self.c.ncols() != nx {
            return mismatch("C must have n_x columns");
        }
        if self.d.ncols() != nx {
            return mismatch("D must have n_x columns");
        }
        if self.g.nrows() != nx {
            return mismatch("G must have n_x rows");
        }
        if self.h.nrows() != ny || self.h.ncols() != self.g.ncols() {
            return mismatch("H must be n_y x n_delta with the same n_delta as G");
        }
        if self.sigma_t.shape() != (nx, nx) {
            return mismatch("Sigma_t must be n_x x n_x");
        }
        if self.sigma_w.shape() != (ny, ny) {
            return mismatch("Sigma_w must be n_y x n_y");
        }
        if self.mu_x1.len() != nx {
            return mismatch("mu_x1 must have length n_x");
        }
        if self.sigma_x1.shape() != (nx, nx) {
            return mismatch("Sigma_x1 must be n_x x n_x");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Min eigenvalue, min singular value, or min normalized rank margin.
    pub measured: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return vec![];
    }
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

/// Checks the covariance, rank and detectability assumptions of the model.
pub fn validate_model(model: &SystemModel) -> Result<ValidationReport> {
    model.check_dimensions()?;
    let mut checks = Vec::new();

    for (name, m) in [
        ("Sigma_t", &model.sigma_t),
        ("Sigma_w", &model.sigma_w),
        ("Sigma_x1", &model.sigma_x1),
    ] {
        let sym_err = (m - m.transpose()).amax();
        let min_eig = linalg::min_eigenvalue(m);
        checks.push(Check {
            name: format!("{name} positive definite"),
            passed: min_eig > TOL_PD && sym_err <= 1e-12 * m.amax().max(1.0),
            measured: min_eig,
            detail: format!("min eigenvalue {min_eig:e}, asymmetry {sym_err:e}"),
        });
    }

    let sv = singular_values(&model.d);
    let max_sv = sv.iter().copied().fold(0.0, f64::max);
    let min_sv = if model.d.nrows() > model.d.ncols() {
        0.0
    } else {
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    };
    checks.push(Check {
        name: "D full row rank".into(),
        passed: max_sv > 0.0 && min_sv > TOL_RANK * max_sv,
        measured: min_sv,
        detail: format!("singular values {sv:?}"),
    });

    checks.push(detectability_check(model));
    Ok(ValidationReport { checks })
}

/// PBH test: every eigenvalue with |λ| >= 1 must keep `[A - λI; C]` full column rank.
fn detectability_check(model: &SystemModel) -> Check {
    let nx = model.nx();
    let eigenvalues = model.a.complex_eigenvalues();
    let mut worst = f64::INFINITY;
    let mut details = Vec::new();
    let mut passed = true;
    for lambda in eigenvalues.iter() {
        if lambda.norm() < 1.0 {
            continue;
        }
        let mut pbh = DMatrix::<Complex<f64>>::zeros(nx + model.ny(), nx);
        for i in 0..nx {
            for j in 0..nx {
                let shift = if i == j { *lambda } else { Complex::new(0.0, 0.0) };
                pbh[(i, j)] = Complex::new(model.a[(i, j)], 0.0) - shift;
            }
        }
        for i in 0..model.ny() {
            for j in 0..nx {
                pbh[(nx + i, j)] = Complex::new(model.c[(i, j)], 0.0);
            }
        }
        let sv = pbh.svd(false, false).singular_values;
        let smax = sv.max();
        let rank = sv.iter().filter(|&&s| s > TOL_RANK * smax.max(f64::MIN_POSITIVE)).count();
        let ratio = if smax > 0.0 { sv.min() / smax } else { 0.0 };
        worst = worst.min(ratio);
        if rank < nx {
            passed = false;
        }
        details.push(format!("λ={lambda}: rank {rank}/{nx}"));
    }
    if details.is_empty() {
        details.push("no eigenvalue on or outside the unit circle".into());
        worst = 1.0;
    }
    Check { name: "(A, C) detectable".into(), passed, measured: worst, detail: details.join("; ") }
}

/// One realization of the plant over `K` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    pub private: Vec<DVector<f64>>,
    /// `u_1 .. u_{K-1}`
    pub inputs: Vec<DVector<f64>>,
    pub faults: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

/// Plant simulator with cached noise square roots, for repeated Monte Carlo runs.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a SystemModel,
    sqrt_t: DMatrix<f64>,
    sqrt_w: DMatrix<f64>,
    sqrt_x1: DMatrix<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a SystemModel) -> Result<Self> {
        model.check_dimensions()?;
        Ok(Self {
            model,
            sqrt_t: linalg::sym_sqrt(&model.sigma_t),
            sqrt_w: linalg::sym_sqrt(&model.sigma_w),
            sqrt_x1: linalg::sym_sqrt(&model.sigma_x1),
        })
    }

    pub fn run(
        &self,
        horizon: usize,
        inputs: &[DVector<f64>],
        faults: Option<&[DVector<f64>]>,
        seed: u64,
    ) -> Result<Trajectory> {
        let m = self.model;
        if horizon == 0 {
            return Err(Error::HorizonMismatch("horizon must be at least 1".into()));
        }
        if inputs.len() != horizon - 1 {
            return Err(Error::HorizonMismatch(format!(
                "{} inputs supplied for horizon {horizon} (expected {})",
                inputs.len(),
                horizon - 1
            )));
        }
        if let Some(f) = faults {
            if f.len() != horizon {
                return Err(Error::HorizonMismatch(format!(
                    "{} fault samples supplied for horizon {horizon}",
                    f.len()
                )));
            }
        }
        if inputs.iter().any(|u| u.len() != m.nu()) {
            return Err(Error::DimensionMismatch("input vector length differs from n_u".into()));
        }
        let zero_fault = DVector::zeros(m.n_delta());
        let faults: Vec<DVector<f64>> = match faults {
            Some(f) => {
                if f.iter().any(|d| d.len() != m.n_delta()) {
                    return Err(Error::DimensionMismatch("fault vector length differs from n_delta".into()));
                }
                f.to_vec()
            }
            None => vec![zero_fault; horizon],
        };

        let mut rng_x1 = rng::stream(seed, Stream::InitialState);
        let mut rng_t = rng::stream(seed, Stream::ProcessNoise);
        let mut rng_w = rng::stream(seed, Stream::MeasurementNoise);

        let mut states = Vec::with_capacity(horizon);
        let mut measurements = Vec::with_capacity(horizon);
        let mut private = Vec::with_capacity(horizon);
        let mut x = rng::colored(&mut rng_x1, Some(&m.mu_x1), &self.sqrt_x1);
        for k in 0..horizon {
            let w = rng::colored(&mut rng_w, None, &self.sqrt_w);
            measurements.push(&m.c * &x + w + &m.h * &faults[k]);
            private.push(&m.d * &x);
            if k + 1 < horizon {
                let t = rng::colored(&mut rng_t, None, &self.sqrt_t);
                let next = &m.a * &x + &m.b * &inputs[k] + t + &m.g * &faults[k];
                states.push(std::mem::replace(&mut x, next));
            } else {
                states.push(x.clone());
            }
        }
        Ok(Trajectory { states, measurements, private, inputs: inputs.to_vec(), faults })
    }
}

/// Simulate the plant; the same `(model, inputs, faults, seed)` gives the same trajectory.
pub fn simulate(
    model: &SystemModel,
    horizon: usize,
    inputs: &[DVector<f64>],
    faults: Option<&[DVector<f64>]>,
    seed: u64,
) -> Result<Trajectory> {
    Simulator::new(model)?.run(horizon, inputs, faults, seed)
}

/// Disclosed data after the mechanism `ỹ_k = y_k + v_k`, `ũ_k = u_k + j_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortedTrajectory {
    pub base: Trajectory,
    pub v: Vec<DVector<f64>>,
    pub j: Vec<DVector<f64>>,
    pub y_tilde: Vec<DVector<f64>>,
    pub u_tilde: Vec<DVector<f64>>,
}

/// Joint Gaussian noise generator for stacked `v^K` and `j^{K-1}`.
#[derive(Debug, Clone)]
pub struct MechanismSampler {
    sqrt_v: DMatrix<f64>,
    sqrt_j: DMatrix<f64>,
}

impl MechanismSampler {
    pub fn new(sigma_v: &DMatrix<f64>, sigma_j: &DMatrix<f64>) -> Result<Self> {
        linalg::check_psd(sigma_v, "Sigma_v_K")?;
        linalg::check_psd(sigma_j, "Sigma_j_K")?;
        Ok(Self { sqrt_v: linalg::sym_sqrt(sigma_v), sqrt_j: linalg::sym_sqrt(sigma_j) })
    }

    pub fn sample_v(&self, seed: u64) -> DVector<f64> {
        rng::colored(&mut rng::stream(seed, Stream::OutputPrivacy), None, &self.sqrt_v)
    }

    pub fn sample_j(&self, seed: u64) -> DVector<f64> {
        rng::colored(&mut rng::stream(seed, Stream::InputPrivacy), None, &self.sqrt_j)
    }

    pub fn apply(&self, traj: &Trajectory, seed: u64) -> Result<DistortedTrajectory> {
        let horizon = traj.horizon();
        let ny = traj.measurements.first().map_or(0, |y| y.len());
        let nu = traj.inputs.first().map_or(0, |u| u.len());
        if self.sqrt_v.nrows() != horizon * ny {
            return Err(Error::DimensionMismatch(format!(
                "Sigma_v_K is {0}x{0}, expected {1}x{1}",
                self.sqrt_v.nrows(),
                horizon * ny
            )));
        }
        if self.sqrt_j.nrows() != traj.inputs.len() * nu {
            return Err(Error::DimensionMismatch(format!(
                "Sigma_j_K is {0}x{0}, expected {1}x{1}",
                self.sqrt_j.nrows(),
                traj.inputs.len() * nu
            )));
        }
        let v_all = self.sample_v(seed);
        let j_all = self.sample_j(seed);
        let v: Vec<DVector<f64>> = (0..horizon).map(|k| v_all.rows(k * ny, ny).into_owned()).collect();
        let j: Vec<DVector<f64>> = (0..traj.inputs.len()).map(|k| j_all.rows(k * nu, nu).into_owned()).collect();
        let y_tilde = traj.measurements.iter().zip(&v).map(|(y, v)| y + v).collect();
        let u_tilde = traj.inputs.iter().zip(&j).map(|(u, j)| u + j).collect();
        Ok(DistortedTrajectory { base: traj.clone(), v, j, y_tilde, u_tilde })
    }
}

/// Distort a trajectory with `v^K ~ N(0, Σ^v_K)` and `j^{K-1} ~ N(0, Σ^j_K)`.
///
/// The noise comes from dedicated streams, independent of the plant noise of
/// `traj` even when the same seed is reused.
pub fn apply_mechanism(
    traj: &Trajectory,
    sigma_v: &DMatrix<f64>,
    sigma_j: &DMatrix<f64>,
    seed: u64,
) -> Result<DistortedTrajectory> {
    MechanismSampler::new(sigma_v, sigma_j)?.apply(traj, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(a: f64, c: f64) -> SystemModel {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        SystemModel {
            a: m(a),
            b: m(1.0),
            c: m(c),
            d: m(1.0),
            g: m(0.0),
            h: m(0.0),
            sigma_t: m(1.0),
            sigma_w: m(1.0),
            mu_x1: DVector::zeros(1),
            sigma_x1: m(1.0),
        }
    }

    #[test]
    fn reactor_passes_validation() {
        let report = validate_model(&SystemModel::reactor()).unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn zero_private_output_fails_rank() {
        let mut model = SystemModel::reactor();
        model.d = DMatrix::zeros(1, 4);
        let report = validate_model(&model).unwrap();
        assert!(!report.check("D full row rank").unwrap().passed);
    }

    #[test]
    fn unstable_unobserved_mode_fails_detectability() {
        let report = validate_model(&scalar_model(2.0, 0.0)).unwrap();
        assert!(!report.check("(A, C) detectable").unwrap().passed);
        let ok = validate_model(&scalar_model(2.0, 1.0)).unwrap();
        assert!(ok.check("(A, C) detectable").unwrap().passed);
    }

    #[test]
    fn dimension_mismatch_precedes_invariants() {
        let mut model = SystemModel::reactor();
        model.b = DMatrix::zeros(3, 1);
        assert!(matches!(validate_model(&model), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn json_roundtrip_uses_exact_field_names() {
        let model = SystemModel::reactor();
        let text = model.to_json().unwrap();
        for key in ["\"A\"", "\"B\"", "\"C\"", "\"D\"", "\"G\"", "\"H\"", "\"Sigma_t\"", "\"Sigma_w\"", "\"mu_x1\"", "\"Sigma_x1\""] {
            assert!(text.contains(key), "missing {key}");
        }
        assert_eq!(SystemModel::from_json(&text).unwrap(), model);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["A"][1][3].as_f64().unwrap(), 0.0031);
    }

    #[test]
    fn identity_dynamics_without_noise_stay_constant() {
        let tiny = DMatrix::identity(2, 2) * TOL_PD;
        let model = SystemModel {
            a: DMatrix::identity(2, 2),
            b: DMatrix::zeros(2, 1),
            c: DMatrix::identity(2, 2),
            d: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            g: DMatrix::zeros(2, 1),
            h: DMatrix::zeros(2, 1),
            sigma_t: tiny.clone(),
            sigma_w: tiny.clone(),
            mu_x1: DVector::from_vec(vec![3.0, -1.0]),
            sigma_x1: tiny,
        };
        let inputs = vec![DVector::zeros(1); 19];
        let traj = simulate(&model, 20, &inputs, None, 1).unwrap();
        for x in &traj.states {
            assert!((x - &model.mu_x1).amax() < 1e-3);
        }
        for (s, x) in traj.private.iter().zip(&traj.states) {
            assert_eq!(*s, &model.d * x);
        }
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let model = SystemModel::reactor();
        let inputs = SystemModel::reactor_inputs(30);
        let a = simulate(&model, 30, &inputs, None, 99).unwrap();
        let b = simulate(&model, 30, &inputs, None, 99).unwrap();
        let c = simulate(&model, 30, &inputs, None, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn horizon_mismatch_is_reported() {
        let model = SystemModel::reactor();
        let inputs = SystemModel::reactor_inputs(10);
        assert!(matches!(simulate(&model, 11, &inputs, None, 0), Err(Error::HorizonMismatch(_))));
        let faults = vec![DVector::zeros(1); 9];
        assert!(matches!(simulate(&model, 10, &inputs, Some(&faults), 0), Err(Error::HorizonMismatch(_))));
    }

    #[test]
    fn output_fault_shifts_second_measurement() {
        let model = SystemModel::reactor();
        let k = 15;
        let inputs = SystemModel::reactor_inputs(k);
        let faults = vec![DVector::from_element(1, 2.5); k];
        let clean = simulate(&model, k, &inputs, None, 5).unwrap();
        let faulty = simulate(&model, k, &inputs, Some(&faults), 5).unwrap();
        for (yc, yf) in clean.measurements.iter().zip(&faulty.measurements) {
            assert!((yf[0] - yc[0]).abs() < 1e-12);
            assert!((yf[1] - yc[1] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mechanism_is_identity() {
        let model = SystemModel::reactor();
        let inputs = SystemModel::reactor_inputs(6);
        let traj = simulate(&model, 6, &inputs, None, 3).unwrap();
        let d = apply_mechanism(&traj, &DMatrix::zeros(12, 12), &DMatrix::zeros(5, 5), 3).unwrap();
        assert_eq!(d.y_tilde, traj.measurements);
        assert_eq!(d.u_tilde, traj.inputs);
    }

    #[test]
    fn mechanism_rejects_indefinite_covariance() {
        let model = SystemModel::reactor();
        let traj = simulate(&model, 2, &SystemModel::reactor_inputs(2), None, 3).unwrap();
        let mut sv = DMatrix::identity(4, 4);
        sv[(0, 0)] = -1.0;
        assert!(matches!(apply_mechanism(&traj, &sv, &DMatrix::identity(1, 1), 0), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn disclosed_data_add_noise_elementwise() {
        let model = SystemModel::reactor();
        let inputs = SystemModel::reactor_inputs(4);
        let traj = simulate(&model, 4, &inputs, None, 8).unwrap();
        let d = apply_mechanism(&traj, &DMatrix::identity(8, 8), &(DMatrix::identity(3, 3) * 4.0), 8).unwrap();
        for k in 0..4 {
            assert_eq!(d.y_tilde[k], &traj.measurements[k] + &d.v[k]);
        }
        for k in 0..3 {
            assert_eq!(d.u_tilde[k], &traj.inputs[k] + &d.j[k]);
        }
    }
}
