//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use privdet::detector;
use privdet::estimation::{self, run_remote_filter};
use privdet::experiments::{self, ExperimentConfig};
use privdet::lifted;
use privdet::linalg;
use privdet::model::{MechanismSampler, Simulator, SystemModel};
use privdet::rng::{self, Stream};
use privdet::special;
use privdet::synthesis::{self, ProblemSpec, SolverOptions};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn kalman_reproduction() -> Outcome {
    let started = Instant::now();
    let design = estimation::solve_dare(&SystemModel::reactor()).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let l_ref = DMatrix::from_row_slice(4, 2, &[0.8271, 0.0, 0.0, 0.8243, 0.0, 0.0002, 0.0, 0.0481]);
    let s_ref = DMatrix::from_diagonal_element(2, 2, 1.0169);
    let dl = (&design.l - l_ref).amax();
    let ds = (&design.sigma_r - s_ref).amax();
    outcome(
        dl <= 5e-4 && ds <= 5e-4 && elapsed < 1.0,
        format!("max|L - L_ref| = {dl:.2e}, max|Sigma - Sigma_ref| = {ds:.2e}, {:.1} ms", elapsed * 1e3),
    )
}

fn joint_law_oracle() -> Outcome {
    let started = Instant::now();
    let model = SystemModel::reactor();
    let k = 4;
    let inputs = SystemModel::reactor_inputs(k);
    let sigma_v = DMatrix::identity(k * 2, k * 2) * 0.5;
    let lifted_sys = lifted::build_lifted(&model, k).unwrap();
    let law = lifted::joint_law(&lifted_sys, &model, &inputs, &sigma_v).unwrap();
    let sim = Simulator::new(&model).unwrap();
    let sampler = MechanismSampler::new(&sigma_v, &DMatrix::zeros(k - 1, k - 1)).unwrap();
    let draws: Vec<DVector<f64>> = (0..200_000u64)
        .into_par_iter()
        .map(|i| {
            let seed = rng::sub_seed(42, i);
            let traj = sim.run(k, &inputs, None, seed).unwrap();
            let dist = sampler.apply(&traj, seed).unwrap();
            let mut stacked = dist.y_tilde.clone();
            stacked.extend(traj.private.iter().cloned());
            linalg::stack(&stacked)
        })
        .collect();
    let err = linalg::relative_frobenius(&linalg::sample_covariance(&draws), &law.sigma_joint);
    let elapsed = started.elapsed().as_secs_f64();
    outcome(err <= 0.05 && elapsed < 60.0, format!("relative Frobenius error {err:.4} over 2e5 runs, {elapsed:.1} s"))
}

fn threshold_calibration() -> Outcome {
    let model = SystemModel::reactor();
    let design = estimation::solve_dare(&model).unwrap();
    let alpha = detector::threshold_alpha(0.1, 2).unwrap();
    // 1000 closed-loop runs of 1000 steps
    let (runs, horizon) = (1000u64, 1000usize);
    let sim = Simulator::new(&model).unwrap();
    let inputs = vec![DVector::zeros(1); horizon - 1];
    let fractions: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let traj = sim.run(horizon, &inputs, None, rng::sub_seed(7, i)).unwrap();
            let res = run_remote_filter(&model, &design, &traj.measurements, &traj.inputs).unwrap();
            detector::alarms(&res.distances, alpha).len() as f64 / horizon as f64
        })
        .collect();
    let far = fractions.iter().sum::<f64>() / runs as f64;
    let da = (alpha - 4.605170).abs();
    outcome(
        da <= 1e-6 && (far - 0.1).abs() <= 0.002,
        format!("alpha = {alpha:.7} (|err| {da:.1e}), empirical FAR {far:.5} over 1e6 residuals"),
    )
}

fn toy_model() -> SystemModel {
    let one = DMatrix::identity(1, 1);
    SystemModel {
        a: DMatrix::zeros(1, 1),
        b: one.clone(),
        c: one.clone(),
        d: one.clone(),
        g: DMatrix::zeros(1, 1),
        h: DMatrix::zeros(1, 1),
        sigma_t: one.clone(),
        sigma_w: DMatrix::from_element(1, 1, 0.5),
        mu_x1: DVector::zeros(1),
        sigma_x1: one,
    }
}

/// Two-step scalar plant with `A = 0`: the first step trades output noise
/// against input noise inside the detection budget, the second step has no
/// input noise and saturates its budget. Grid over `(σ_v², σ_j²)` at step 1.
fn solver_oracle() -> Outcome {
    let started = Instant::now();
    let model = toy_model();
    let problem = synthesis::assemble(&model, &ProblemSpec::new(2, 0.1, 0.3)).unwrap();
    let design = synthesis::solve(&problem, &SolverOptions::default()).unwrap();

    let (sx, st, sw) = (1.0, 1.0, 0.5);
    let budget = (problem.beta_star.unwrap() - 1.0) * problem.design.sigma_r[(0, 0)] - problem.margin;
    let mi = |s: f64, v: f64| 0.5 * ((s + sw + v) / (sw + v)).ln();
    let h = |j: f64| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * j).ln();
    let n = 400;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..n {
        let v = budget * i as f64 / (n - 1) as f64;
        for jj in 1..=n {
            let j = (budget - v) * jj as f64 / n as f64;
            if j > 0.0 {
                let c = mi(sx, v) + mi(st, budget) - h(j);
                if c < best.0 {
                    best = (c, v, j);
                }
            }
        }
    }
    // the closed form agrees with the library cost at the grid optimum
    let sv = DMatrix::from_diagonal(&DVector::from_vec(vec![best.1, budget]));
    let sj = DMatrix::from_element(1, 1, best.2);
    let lib = problem.cost(&sv, &sj).unwrap();
    let gap = (design.cost - best.0).abs();
    let elapsed = started.elapsed().as_secs_f64();
    outcome(
        gap <= 1e-3 && (lib - best.0).abs() < 1e-9 && elapsed < 60.0,
        format!("solver {:.6}, grid {:.6} (|diff| {gap:.1e}), {elapsed:.1} s", design.cost, best.0),
    )
}

fn tradeoff_monotonicity() -> Outcome {
    let started = Instant::now();
    let cfg = ExperimentConfig { horizon: 10, epsilons: (1..=8).map(|i| i as f64 / 10.0).collect(), ..Default::default() };
    let r = experiments::run_cost_vs_epsilon(&cfg).unwrap();
    let costs: Vec<Option<f64>> = r.numbers("cost");
    let margins: Vec<Option<f64>> = r.numbers("min_margin");
    let converged = costs.iter().all(Option::is_some);
    let costs: Vec<f64> = costs.into_iter().flatten().collect();
    let monotone = costs.windows(2).all(|w| w[1] <= w[0]);
    let worst = margins.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let elapsed = started.elapsed().as_secs_f64();
    outcome(
        converged && monotone && worst >= 0.0 && elapsed < 600.0,
        format!(
            "costs {:?}, smallest margin {worst:.2e}, {elapsed:.1} s",
            costs.iter().map(|c| (c * 1e3).round() / 1e3).collect::<Vec<_>>()
        ),
    )
}

fn far_bound() -> Outcome {
    let cfg = ExperimentConfig { horizon: 10, epsilons: vec![0.1, 0.3, 0.5], runs: 100_000, ..Default::default() };
    let r = experiments::run_far_sweep(&cfg).unwrap();
    let emp: Vec<f64> = r.numbers("far_empirical").into_iter().map(Option::unwrap).collect();
    let ana: Vec<f64> = r.numbers("far_analytic").into_iter().map(Option::unwrap).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, eps) in cfg.epsilons.iter().enumerate() {
        ok &= emp[i] <= 0.1 + eps + 0.02 && (ana[i] - emp[i]).abs() <= 0.02;
        parts.push(format!("eps {eps}: empirical {:.4}, analytic {:.4}", emp[i], ana[i]));
    }
    outcome(ok, parts.join("; "))
}

fn cdf_bound() -> Outcome {
    let mut rng = rng::stream(2024, Stream::MonteCarlo);
    let mut worst = f64::INFINITY;
    for case in 0..5 {
        let n = 2 + case % 3;
        let beta = 1.5 + case as f64;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let spd = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
        // rescale so the largest eigenvalue lands inside (0, β]
        let scale = beta * rng.random_range(0.5..1.0) / linalg::max_eigenvalue(&spd);
        let sigma = spd * scale;
        let mut draws = special::sample_quadratic_form(&sigma, &DVector::zeros(n), 100_000, 100 + case as u64);
        draws.sort_by(f64::total_cmp);
        for i in 1..=20 {
            let alpha = 2.0 * beta * special::inv_reg_lower_gamma(n as f64 / 2.0, i as f64 / 21.0).unwrap();
            let f = special::empirical_cdf(&draws, alpha);
            let est = special::McEstimate::from_count((f * draws.len() as f64).round() as usize, draws.len());
            let fq = special::reg_lower_gamma(n as f64 / 2.0, alpha / (2.0 * beta)).unwrap();
            worst = worst.min((est.value - fq + 3.0 * est.stderr.max(1e-12)) / est.stderr.max(1e-12));
        }
    }
    outcome(worst >= 0.0, format!("5 matrices x 20 thresholds, smallest (F - F_q + 3 se)/se = {worst:.2}"))
}

fn welch_satterthwaite() -> Outcome {
    let model = SystemModel::reactor();
    let problem = synthesis::assemble(&model, &ProblemSpec::new(10, 0.1, 0.3)).unwrap();
    let design = synthesis::solve(&problem, &SolverOptions::default()).unwrap();
    let sr = &problem.design.sigma_r;
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let st = problem.distorted_cov_at(&design.sigma_v, &design.sigma_j, k).unwrap();
        let fit = special::ws_gamma_fit(&detector::distortion_eigenvalues(&st, sr).unwrap()).unwrap();
        let (sigma_prime, _) = detector::distorted_quadratic_form(&DVector::zeros(2), &st, sr).unwrap();
        let draws = special::sample_quadratic_form(&sigma_prime, &DVector::zeros(2), 100_000, rng::sub_seed(5, k as u64));
        worst = worst.max(special::ks_distance(&draws, |x| fit.cdf(x)));
    }
    outcome(worst <= 0.02, format!("largest KS distance over the 10 steps {worst:.4} (1e5 draws each)"))
}

fn detection_shape() -> Outcome {
    let cfg = ExperimentConfig { epsilons: vec![0.0, 0.1, 0.3, 0.5], ..Default::default() };
    let study = experiments::run_detection_and_roc(&cfg).unwrap();
    let t = &study.detection;
    let (delta, eps, rate, se) = (t.numbers("delta"), t.numbers("epsilon"), t.numbers("det_rate"), t.numbers("det_stderr"));
    let at = |d: f64, e: f64| {
        let i = (0..t.rows.len()).find(|&i| delta[i] == Some(d) && eps[i] == Some(e)).unwrap();
        (rate[i].unwrap(), se[i].unwrap())
    };
    let deltas = &cfg.fault.deltas;
    let small = deltas[1];
    let (r0, s0) = at(small, 0.0);
    let (r5, s5) = at(small, 0.5);
    let above = r5 - r0 > 3.0 * (s0 * s0 + s5 * s5).sqrt();
    // "large": the first magnitude at which the undistorted detector exceeds 0.9
    let large = *deltas.iter().find(|&&d| at(d, 0.0).0 > 0.9).unwrap();
    let (l0, ls0) = at(large, 0.0);
    let (l5, ls5) = at(large, 0.5);
    let below = l0 - l5 > 3.0 * (ls0 * ls0 + ls5 * ls5).sqrt();
    let top = *deltas.last().unwrap();
    let floor = cfg.epsilons.iter().map(|&e| at(top, e).0).fold(1.0, f64::min);
    outcome(
        above && below && floor >= 0.99,
        format!(
            "delta {small}: eps 0.5 {r5:.4} vs eps 0 {r0:.4}; delta {large}: eps 0.5 {l5:.4} vs eps 0 {l0:.4}; smallest rate at delta {top}: {floor:.5}"
        ),
    )
}

fn roc_ordering() -> Outcome {
    let model = SystemModel::reactor();
    let design = estimation::solve_dare(&model).unwrap();
    let grid = ExperimentConfig::default().far_grid;
    let aucs: Vec<f64> = [0.1, 1.0, 2.0, 3.0, 4.0]
        .iter()
        .map(|&d| {
            let shift = estimation::fault_residual_mean(&model, &design, &DVector::from_element(1, d)).unwrap();
            detector::roc_curve_no_privacy(&shift, &design.sigma_r, &grid).unwrap().auc()
        })
        .collect();
    let rising = aucs.windows(2).all(|w| w[1] > w[0]);

    let cfg = ExperimentConfig {
        epsilons: vec![0.01, 0.3, 0.5],
        fault: experiments::FaultSpec { deltas: vec![2.0], g: None, h: None },
        samples: 1_000_000,
        ..Default::default()
    };
    let study = experiments::run_detection_and_roc(&cfg).unwrap();
    let auc: Vec<f64> = study.auc.numbers("auc").into_iter().map(Option::unwrap).collect();
    let se: Vec<f64> = study.auc.numbers("auc_stderr").into_iter().map(Option::unwrap).collect();
    let falling = (1..auc.len()).all(|i| auc[i - 1] - auc[i] > 3.0 * (se[i - 1].powi(2) + se[i].powi(2)).sqrt());
    outcome(
        rising && falling,
        format!(
            "no privacy AUC over delta {{0.1,1,2,3,4}}: {:?}; delta 2 AUC over eps {{0.01,0.3,0.5}}: {:?} (stderr {:?})",
            aucs.iter().map(|a| format!("{a:.5}")).collect::<Vec<_>>(),
            auc.iter().map(|a| format!("{a:.5}")).collect::<Vec<_>>(),
            se.iter().map(|s| format!("{s:.1e}")).collect::<Vec<_>>(),
        ),
    )
}

fn mmse_degradation() -> Outcome {
    // 0.9 = 1 - target FAR: the detection constraint vanishes and the cap applies
    let cfg = ExperimentConfig { epsilons: vec![0.1, 0.75, 0.9], ..Default::default() };
    let r = experiments::run_trajectory_comparison(&cfg).unwrap();
    let k = cfg.horizon;
    let mse: Vec<f64> = r.numbers("mse_distorted").into_iter().map(Option::unwrap).collect();
    let totals: Vec<f64> = (0..3).map(|b| mse[b * k..(b + 1) * k].iter().sum::<f64>()).collect();
    outcome(
        totals.windows(2).all(|w| w[1] > w[0]),
        format!("adversary MSE summed over the horizon: {:?}", totals.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>()),
    )
}

fn bound_formulas() -> Outcome {
    let c1 = lifted::logconcave_constant(1);
    let reference = 0.435232;
    let c1_ok = (c1 - reference).abs() <= 1e-5;
    let positive = (1..=10_000).all(|n| lifted::logconcave_offset(n) > 0.0);
    let mut rng = rng::stream(12, Stream::MonteCarlo);
    let ordered = (0..1000).all(|_| {
        let n = rng.random_range(1..500);
        let i = rng.random_range(0.0..50.0);
        let b = lifted::logconcave_bounds(n, i);
        b.entropy_power >= i && b.max_density >= i
    });
    let mut detail = format!("c(1) = {c1:.9} vs {reference} +/- 1e-5; C_n > 0 for n <= 1e4: {positive}; bounds >= I: {ordered}");
    if !c1_ok {
        detail.push_str("; e^2/(12 sqrt 2) evaluates to 0.4354043, so the reference value disagrees with its own formula");
    }
    outcome(c1_ok && positive && ordered, detail)
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("Kalman reproduction", kalman_reproduction),
        ("joint law oracle", joint_law_oracle),
        ("threshold calibration", threshold_calibration),
        ("solver correctness (grid oracle)", solver_oracle),
        ("trade-off monotonicity", tradeoff_monotonicity),
        ("false-alarm bound respected", far_bound),
        ("CDF bound", cdf_bound),
        ("Welch-Satterthwaite fidelity", welch_satterthwaite),
        ("detection-rate shape", detection_shape),
        ("ROC ordering", roc_ordering),
        ("MMSE degradation", mmse_degradation),
        ("bound formulas", bound_formulas),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += !result.passed as usize;
        println!(
            "criterion {:>2} {} {name}: {} [{:.1} s]",
            i + 1,
            if result.passed { "PASS" } else { "FAIL" },
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
