//! Horizon-K lifted dynamics and Gaussian information quantities.
//!
//! Stacking `x^K = F_K x_1 + J_K t^{K-1} + N_K u^{K-1}` turns the plant into one
//! linear-Gaussian map, so `(ỹ^K, s^K)` is jointly normal and its mutual
//! information follows from log-determinants.

use std::f64::consts::{E, PI};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SystemModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSystem {
    pub horizon: usize,
    /// `K n_x × n_x`, block `i` is `A^{i-1}`.
    pub f: DMatrix<f64>,
    /// `K n_x × (K-1) n_x`, block `(i, j)` is `A^{i-j-1}` for `i > j`.
    pub j: DMatrix<f64>,
    /// `J_K (I ⊗ B)`
    pub n: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub d_tilde: DMatrix<f64>,
    /// Covariance of the stacked state, `F Σ^x_1 Fᵀ + J (I ⊗ Σ^t) Jᵀ`.
    pub q: DMatrix<f64>,
}

pub fn build_lifted(model: &SystemModel, horizon: usize) -> Result<LiftedSystem> {
    if horizon == 0 {
        return Err(Error::HorizonMismatch("horizon must be at least 1".into()));
    }
    model.check_dimensions()?;
    let nx = model.nx();
    let k = horizon;

    let mut powers = Vec::with_capacity(k);
    powers.push(DMatrix::<f64>::identity(nx, nx));
    for i in 1..k {
        let next = &model.a * &powers[i - 1];
        powers.push(next);
    }

    let mut f = DMatrix::zeros(k * nx, nx);
    for (i, p) in powers.iter().enumerate() {
        f.view_mut((i * nx, 0), (nx, nx)).copy_from(p);
    }
    let mut j = DMatrix::zeros(k * nx, (k - 1) * nx);
    for row in 1..k {
        for col in 0..row {
            j.view_mut((row * nx, col * nx), (nx, nx)).copy_from(&powers[row - col - 1]);
        }
    }
    let n = &j * linalg::kron(&DMatrix::identity(k - 1, k - 1), &model.b);
    let c_tilde = linalg::kron(&DMatrix::identity(k, k), &model.c);
    let d_tilde = linalg::kron(&DMatrix::identity(k, k), &model.d);
    let sigma_t_k = linalg::kron(&DMatrix::identity(k - 1, k - 1), &model.sigma_t);
    let q = linalg::symmetrize(&(&f * &model.sigma_x1 * f.transpose() + &j * sigma_t_k * j.transpose()));
    Ok(LiftedSystem { horizon, f, j, n, c_tilde, d_tilde, q })
}

impl LiftedSystem {
    /// Stacked state mean `F μ^x_1 + N u^{K-1}`.
    pub fn state_mean(&self, model: &SystemModel, inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        if inputs.len() + 1 != self.horizon {
            return Err(Error::HorizonMismatch(format!("{} inputs for horizon {}", inputs.len(), self.horizon)));
        }
        let mut mean = &self.f * &model.mu_x1;
        if !inputs.is_empty() {
            mean += &self.n * linalg::stack(inputs);
        }
        Ok(mean)
    }

    pub fn sigma_s(&self) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.d_tilde * &self.q * self.d_tilde.transpose()))
    }

    pub fn sigma_sy(&self) -> DMatrix<f64> {
        &self.d_tilde * &self.q * self.c_tilde.transpose()
    }

    /// Covariance of the undistorted stacked measurement, `C̃ Q C̃ᵀ + I ⊗ Σ^w`.
    pub fn sigma_y0(&self, model: &SystemModel) -> DMatrix<f64> {
        let k = self.horizon;
        linalg::symmetrize(
            &(&self.c_tilde * &self.q * self.c_tilde.transpose()
                + linalg::kron(&DMatrix::identity(k, k), &model.sigma_w)),
        )
    }
}

/// Joint Gaussian law of `(ỹ^K, s^K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLaw {
    pub mean_y: DVector<f64>,
    pub mean_s: DVector<f64>,
    pub sigma_y: DMatrix<f64>,
    pub sigma_s: DMatrix<f64>,
    pub sigma_sy: DMatrix<f64>,
    /// `[[Σ_y, Σ_syᵀ], [Σ_sy, Σ_s]]`, ordered `(ỹ, s)`.
    pub sigma_joint: DMatrix<f64>,
}

pub fn joint_law(
    lifted: &LiftedSystem,
    model: &SystemModel,
    inputs: &[DVector<f64>],
    sigma_v: &DMatrix<f64>,
) -> Result<JointLaw> {
    let ky = lifted.horizon * model.ny();
    if sigma_v.shape() != (ky, ky) {
        return Err(Error::DimensionMismatch(format!(
            "Sigma_v_K is {}x{}, expected {ky}x{ky}",
            sigma_v.nrows(),
            sigma_v.ncols()
        )));
    }
    linalg::check_psd(sigma_v, "Sigma_v_K")?;
    let mean_x = lifted.state_mean(model, inputs)?;
    let sigma_y = linalg::symmetrize(&(lifted.sigma_y0(model) + sigma_v));
    let sigma_s = lifted.sigma_s();
    let sigma_sy = lifted.sigma_sy();
    let ks = sigma_s.nrows();
    let mut sigma_joint = DMatrix::zeros(ky + ks, ky + ks);
    sigma_joint.view_mut((0, 0), (ky, ky)).copy_from(&sigma_y);
    sigma_joint.view_mut((ky, ky), (ks, ks)).copy_from(&sigma_s);
    sigma_joint.view_mut((ky, 0), (ks, ky)).copy_from(&sigma_sy);
    sigma_joint.view_mut((0, ky), (ky, ks)).copy_from(&sigma_sy.transpose());
    linalg::cholesky(&sigma_joint, "Sigma_joint")?;
    Ok(JointLaw {
        mean_y: &lifted.c_tilde * &mean_x,
        mean_s: &lifted.d_tilde * &mean_x,
        sigma_y,
        sigma_s,
        sigma_sy,
        sigma_joint,
    })
}

impl JointLaw {
    /// Posterior covariance of `s` given `ỹ`.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>> {
        let gain_t = linalg::spd_solve(&self.sigma_y, &self.sigma_sy.transpose(), "Sigma_y")?;
        Ok(linalg::symmetrize(&(&self.sigma_s - &self.sigma_sy * gain_t)))
    }
}

fn logdet_or_singular(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    linalg::logdet(m).ok_or_else(|| Error::SingularCovariance { name: name.into(), cond: linalg::condition_number(m) })
}

/// `I[s; ỹ] = ½ log det Σ_s - ½ log det (Σ_s - Σ_sy Σ_y⁻¹ Σ_syᵀ)` in nats.
pub fn mutual_information(law: &JointLaw) -> Result<f64> {
    let schur = law.schur_complement()?;
    let value = 0.5 * (logdet_or_singular(&law.sigma_s, "Sigma_s")? - logdet_or_singular(&schur, "Schur complement")?);
    Ok(value.max(0.0))
}

/// The same quantity as `h[s] + h[ỹ] - h[s, ỹ]`.
pub fn mutual_information_by_entropies(law: &JointLaw) -> Result<f64> {
    Ok(gaussian_entropy(&law.sigma_s)? + gaussian_entropy(&law.sigma_y)? - gaussian_entropy(&law.sigma_joint)?)
}

/// Differential entropy of `N(·, Σ)` in nats. An empty covariance has entropy 0.
pub fn gaussian_entropy(sigma: &DMatrix<f64>) -> Result<f64> {
    let m = sigma.nrows() as f64;
    Ok(0.5 * linalg::logdet_checked(sigma, "Sigma")? + 0.5 * m * (1.0 + (2.0 * PI).ln()))
}

/// Leakage cost `I[s^K; ỹ^K] - h[j^{K-1}]`.
pub fn leakage_cost(law: &JointLaw, sigma_j: &DMatrix<f64>) -> Result<f64> {
    Ok(mutual_information(law)? - gaussian_entropy(sigma_j)?)
}

/// `c(n) = e² n² / (4 √2 (n + 2))`.
pub fn logconcave_constant(n: usize) -> f64 {
    let n = n as f64;
    E * E * n * n / (4.0 * 2f64.sqrt() * (n + 2.0))
}

/// `C_n = (n / 2) ln(2 π e c(n))`.
pub fn logconcave_offset(n: usize) -> f64 {
    0.5 * n as f64 * (2.0 * PI * E * logconcave_constant(n)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogConcaveBounds {
    /// `I_gauss + C_n`
    pub entropy_power: f64,
    /// `I_gauss + n`
    pub max_density: f64,
}

/// Leakage bounds for log-concave noise with the same covariance as the Gaussian design.
pub fn logconcave_bounds(n: usize, i_gauss: f64) -> LogConcaveBounds {
    assert!(n >= 1, "dimension must be positive");
    LogConcaveBounds { entropy_power: i_gauss + logconcave_offset(n), max_density: i_gauss + n as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{relative_frobenius, sample_covariance};
    use crate::model::{apply_mechanism, Simulator};
    use crate::rng;
    use proptest::prelude::*;
    use rayon::prelude::*;

    fn scalar_model(a: f64) -> SystemModel {
        let one = DMatrix::identity(1, 1);
        SystemModel {
            a: DMatrix::from_element(1, 1, a),
            b: one.clone(),
            c: one.clone(),
            d: one.clone(),
            g: DMatrix::zeros(1, 1),
            h: DMatrix::zeros(1, 1),
            sigma_t: one.clone(),
            sigma_w: one.clone(),
            mu_x1: DVector::zeros(1),
            sigma_x1: one,
        }
    }

    #[test]
    fn single_step_lift() {
        let m = SystemModel::reactor();
        let l = build_lifted(&m, 1).unwrap();
        assert_eq!(l.f, DMatrix::identity(4, 4));
        assert_eq!(l.j.shape(), (4, 0));
        assert_eq!(l.n.shape(), (4, 0));
        assert_eq!(l.q, m.sigma_x1);
    }

    #[test]
    fn scalar_three_step_lift() {
        let a = 0.7;
        let l = build_lifted(&scalar_model(a), 3).unwrap();
        assert_eq!(l.f, DMatrix::from_column_slice(3, 1, &[1.0, a, a * a]));
        assert_eq!(l.j, DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, a, 1.0]));
    }

    // Unroll the recursion one impulse at a time, independently of the block formulas.
    fn unroll(m: &SystemModel, k: usize, x1: &DVector<f64>, t: &[DVector<f64>], u: &[DVector<f64>]) -> DVector<f64> {
        let mut xs = vec![x1.clone()];
        for i in 0..k - 1 {
            let next = &m.a * &xs[i] + &m.b * &u[i] + &t[i];
            xs.push(next);
        }
        linalg::stack(&xs)
    }

    #[test]
    fn reactor_lift_matches_unrolled_recursion() {
        let m = SystemModel::reactor();
        let k = 5;
        let l = build_lifted(&m, k).unwrap();
        let zx = DVector::zeros(4);
        let zu = DVector::zeros(1);
        let basis = |n: usize, i: usize| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            e
        };
        for i in 0..4 {
            let col = unroll(&m, k, &basis(4, i), &vec![zx.clone(); k - 1], &vec![zu.clone(); k - 1]);
            assert!((col - l.f.column(i)).amax() < 1e-12);
        }
        for step in 0..k - 1 {
            for i in 0..4 {
                let mut t = vec![zx.clone(); k - 1];
                t[step] = basis(4, i);
                let col = unroll(&m, k, &zx, &t, &vec![zu.clone(); k - 1]);
                assert!((col - l.j.column(step * 4 + i)).amax() < 1e-12);
            }
            let mut u = vec![zu.clone(); k - 1];
            u[step] = basis(1, 0);
            let col = unroll(&m, k, &zx, &vec![zx.clone(); k - 1], &u);
            assert!((col - l.n.column(step)).amax() < 1e-12);
        }
    }

    fn stacked_samples(m: &SystemModel, k: usize, sigma_v: &DMatrix<f64>, runs: usize) -> Vec<DVector<f64>> {
        let sim = Simulator::new(m).unwrap();
        let inputs = SystemModel::reactor_inputs(k);
        let sigma_j = DMatrix::zeros(k - 1, k - 1);
        (0..runs)
            .into_par_iter()
            .map(|i| {
                let seed = rng::sub_seed(2024, i as u64);
                let traj = sim.run(k, &inputs, None, seed).unwrap();
                let dist = apply_mechanism(&traj, sigma_v, &sigma_j, seed).unwrap();
                let mut parts = dist.y_tilde.clone();
                parts.extend(traj.private.iter().cloned());
                linalg::stack(&parts)
            })
            .collect()
    }

    #[test]
    fn joint_law_matches_simulation() {
        let m = SystemModel::reactor();
        let k = 4;
        let l = build_lifted(&m, k).unwrap();
        let sigma_v = DMatrix::zeros(k * 2, k * 2);
        let law = joint_law(&l, &m, &SystemModel::reactor_inputs(k), &sigma_v).unwrap();
        let samples = stacked_samples(&m, k, &sigma_v, 200_000);
        let cov = sample_covariance(&samples);
        assert!(relative_frobenius(&cov, &law.sigma_joint) < 0.05);
        let mean = samples.iter().fold(DVector::zeros(samples[0].len()), |acc, s| acc + s) / samples.len() as f64;
        let expected = linalg::stack(&[law.mean_y.clone(), law.mean_s.clone()]);
        assert!((mean - &expected).norm() / expected.norm() < 0.01);
    }

    #[test]
    fn private_block_ignores_mechanism() {
        let m = SystemModel::reactor();
        let l = build_lifted(&m, 4).unwrap();
        let inputs = SystemModel::reactor_inputs(4);
        let a = joint_law(&l, &m, &inputs, &DMatrix::zeros(8, 8)).unwrap();
        let b = joint_law(&l, &m, &inputs, &DMatrix::identity(8, 8)).unwrap();
        assert_eq!(a.sigma_s, b.sigma_s);
        assert_eq!(a.sigma_sy, b.sigma_sy);
    }

    #[test]
    fn zero_input_zero_mean() {
        let mut m = SystemModel::reactor();
        m.mu_x1 = DVector::zeros(4);
        let l = build_lifted(&m, 6).unwrap();
        let law = joint_law(&l, &m, &vec![DVector::zeros(1); 5], &DMatrix::zeros(12, 12)).unwrap();
        assert_eq!(law.mean_s, DVector::zeros(6));
    }

    fn bivariate(rho: f64) -> JointLaw {
        let y = DMatrix::identity(1, 1);
        let sy = DMatrix::from_element(1, 1, rho);
        JointLaw {
            mean_y: DVector::zeros(1),
            mean_s: DVector::zeros(1),
            sigma_y: y.clone(),
            sigma_s: y,
            sigma_sy: sy,
            sigma_joint: DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        }
    }

    #[test]
    fn mutual_information_closed_forms() {
        assert_eq!(mutual_information(&bivariate(0.0)).unwrap(), 0.0);
        for rho in [0.1f64, 0.5, 0.9, -0.7] {
            let expected = -0.5 * (1.0 - rho * rho).ln();
            assert!((mutual_information(&bivariate(rho)).unwrap() - expected).abs() < 1e-14);
            assert!((mutual_information_by_entropies(&bivariate(rho)).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn leakage_decreases_with_output_noise() {
        let m = SystemModel::reactor();
        let k = 5;
        let l = build_lifted(&m, k).unwrap();
        let inputs = SystemModel::reactor_inputs(k);
        let values: Vec<f64> = [0.0, 1.0, 10.0, 100.0]
            .iter()
            .map(|&s| mutual_information(&joint_law(&l, &m, &inputs, &(DMatrix::identity(10, 10) * s)).unwrap()).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn entropy_closed_forms() {
        let unit = DMatrix::from_element(1, 1, 1.0 / (2.0 * PI * E));
        assert!(gaussian_entropy(&unit).unwrap().abs() < 1e-14);
        for m in [1, 3, 7] {
            let h = gaussian_entropy(&DMatrix::identity(m, m)).unwrap();
            assert!((h - 0.5 * m as f64 * (1.0 + (2.0 * PI).ln())).abs() < 1e-13);
        }
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = DMatrix::from_element(1, 1, 5.0);
        let joint = linalg::block_diag(&[a.clone(), b.clone()]);
        let sum = gaussian_entropy(&a).unwrap() + gaussian_entropy(&b).unwrap();
        assert!((gaussian_entropy(&joint).unwrap() - sum).abs() < 1e-12);
        assert!(gaussian_entropy(&-DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn logconcave_constant_at_one() {
        assert!((logconcave_constant(1) - 0.435_404_306).abs() < 1e-9);
        assert!((logconcave_constant(1) - E * E / (12.0 * 2f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn logconcave_offset_is_positive() {
        assert!((1..=10_000).all(|n| logconcave_offset(n) > 0.0));
    }

    fn random_model(vals: &[f64]) -> SystemModel {
        let nx = 3;
        let a = DMatrix::from_row_slice(nx, nx, &vals[0..9]) * 0.4;
        let psd = |v: &[f64], n: usize, floor: f64| {
            let m = DMatrix::from_row_slice(n, n, v);
            &m * m.transpose() + DMatrix::identity(n, n) * floor
        };
        SystemModel {
            a,
            b: DMatrix::from_row_slice(nx, 1, &vals[9..12]),
            c: DMatrix::from_row_slice(2, nx, &vals[12..18]),
            d: DMatrix::from_row_slice(1, nx, &[1.0, vals[18], vals[19]]),
            g: DMatrix::zeros(nx, 1),
            h: DMatrix::zeros(2, 1),
            sigma_t: psd(&vals[20..29], 3, 0.05),
            sigma_w: psd(&vals[29..33], 2, 0.05),
            mu_x1: DVector::from_row_slice(&vals[33..36]),
            sigma_x1: psd(&vals[36..45], 3, 0.05),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn joint_law_pd_and_routes_agree(vals in proptest::collection::vec(-1.0f64..1.0, 45), v in proptest::collection::vec(-1.0f64..1.0, 64), k in 1usize..5) {
            let m = random_model(&vals);
            let l = build_lifted(&m, k).unwrap();
            let n = 2 * k;
            let vm = DMatrix::from_row_slice(n, n, &v[..n * n]);
            let sigma_v = &vm * vm.transpose();
            let law = joint_law(&l, &m, &vec![DVector::zeros(1); k - 1], &sigma_v).unwrap();
            let a = mutual_information(&law).unwrap();
            let b = mutual_information_by_entropies(&law).unwrap();
            prop_assert!((a - b).abs() <= 1e-8, "{} vs {}", a, b);
        }

        #[test]
        fn extra_noise_never_increases_leakage(vals in proptest::collection::vec(-1.0f64..1.0, 45), v in proptest::collection::vec(-1.0f64..1.0, 36), w in proptest::collection::vec(-1.0f64..1.0, 36)) {
            let m = random_model(&vals);
            let l = build_lifted(&m, 3).unwrap();
            let inputs = vec![DVector::zeros(1); 2];
            let a = DMatrix::from_row_slice(6, 6, &v);
            let b = DMatrix::from_row_slice(6, 6, &w);
            let small = &a * a.transpose();
            let large = &small + &b * b.transpose();
            let i_small = mutual_information(&joint_law(&l, &m, &inputs, &small).unwrap()).unwrap();
            let i_large = mutual_information(&joint_law(&l, &m, &inputs, &large).unwrap()).unwrap();
            prop_assert!(i_large <= i_small + 1e-10);
        }

        #[test]
        fn bounds_dominate_gaussian_leakage(n in 1usize..500, i in 0.0f64..50.0) {
            let b = logconcave_bounds(n, i);
            prop_assert!(b.entropy_power >= i && b.max_density >= i);
        }
    }
}
