//! Experiment drivers: sweeps over the distortion level `ε` emitting CSV
//! tables, each with a JSON sidecar carrying the configuration hash and seeds.
//!
//! Every row owns its random streams, so rows run in parallel and a rerun with
//! the same configuration writes byte-identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{self, RocCurve, RocPoint};
use crate::error::{Error, Result};
use crate::estimation::{self, KalmanDesign, MmseEstimator};
use crate::lifted::{self, LiftedSystem};
use crate::linalg::{self, rowmajor};
use crate::model::{MechanismSampler, SystemModel};
use crate::rng;
use crate::synthesis::{self, MechanismDesign, ProblemSpec, SolverOptions, Structure, SynthesisProblem};

pub const MIN_SAMPLES: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Constant fault magnitudes; a vector fault is `δ·1`.
    pub deltas: Vec<f64>,
    /// Overrides the model's fault-to-state matrix.
    #[serde(default, rename = "G")]
    pub g: Option<Vec<Vec<f64>>>,
    /// Overrides the model's fault-to-output matrix.
    #[serde(default, rename = "H")]
    pub h: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Model file; the bundled reactor when absent.
    #[serde(default)]
    pub model: Option<PathBuf>,
    pub horizon: usize,
    pub target_far: f64,
    pub epsilons: Vec<f64>,
    pub fault: FaultSpec,
    pub seed: u64,
    /// Draws per Monte Carlo quadratic-form estimate.
    pub samples: usize,
    /// Closed-loop runs per empirical false-alarm estimate.
    pub runs: usize,
    /// False-alarm targets swept along each ROC curve.
    pub far_grid: Vec<f64>,
    /// ROC point reported as a flagged row.
    pub marked_far: f64,
    pub structure: Structure,
    #[serde(default)]
    pub margin: Option<f64>,
    pub cap: f64,
    pub solver: SolverOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: None,
            horizon: 10,
            target_far: 0.1,
            epsilons: (1..=8).map(|i| i as f64 / 10.0).collect(),
            fault: FaultSpec {
                deltas: vec![0.0, 0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 20.0, 24.0, 32.0, 48.0],
                g: None,
                h: None,
            },
            seed: 0,
            samples: 100_000,
            runs: 10_000,
            far_grid: vec![
                1e-4, 1e-3, 0.005, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99,
            ],
            marked_far: 0.3,
            structure: Structure::Full,
            margin: None,
            cap: synthesis::DEFAULT_CAP,
            solver: SolverOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.target_far > 0.0 && self.target_far < 1.0) {
            return bad(format!("target false-alarm rate {} outside (0, 1)", self.target_far));
        }
        if self.epsilons.is_empty() {
            return bad("epsilon grid is empty".into());
        }
        let top = 1.0 - self.target_far;
        if let Some(e) = self.epsilons.iter().find(|&&e| !(e >= 0.0 && e <= top + 1e-12)) {
            return bad(format!("epsilon {e} outside [0, {top}]"));
        }
        if self.samples < MIN_SAMPLES || self.runs < MIN_SAMPLES {
            return bad(format!("sample counts must be at least {MIN_SAMPLES}"));
        }
        if self.fault.deltas.iter().any(|d| !d.is_finite()) {
            return bad("fault magnitudes must be finite".into());
        }
        if !(self.marked_far > 0.0 && self.marked_far < 1.0) {
            return bad(format!("marked false-alarm rate {} outside (0, 1)", self.marked_far));
        }
        Ok(())
    }

    /// The model with any fault overrides applied.
    pub fn load_model(&self) -> Result<SystemModel> {
        let mut model = match &self.model {
            Some(path) => SystemModel::load(path)?,
            None => SystemModel::reactor(),
        };
        let parse = |rows: &Vec<Vec<f64>>, name: &str| {
            rowmajor::from_rows(rows).map_err(|e| Error::Config(format!("fault matrix {name}: {e}")))
        };
        if let Some(g) = &self.fault.g {
            model.g = parse(g, "G")?;
        }
        if let Some(h) = &self.fault.h {
            model.h = parse(h, "H")?;
        }
        model.check_dimensions()?;
        Ok(model)
    }

    fn spec(&self, epsilon: f64) -> ProblemSpec {
        let mut spec = ProblemSpec::new(self.horizon, self.target_far, epsilon).with_structure(self.structure);
        spec.margin = self.margin;
        spec.cap = self.cap;
        spec
    }

    /// SHA-256 over the canonical JSON of the configuration and the resolved model.
    pub fn hash(&self, model: &SystemModel) -> Result<String> {
        let canonical = serde_json::to_string(&(self, model))?;
        Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }

    fn structure_label(&self) -> String {
        match self.structure {
            Structure::Full => "full".into(),
            Structure::BlockDiagonal => "block_diagonal (independent noise per step)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    Empty,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(x) => write!(f, "{x}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Empty => Ok(()),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Num(x as f64)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.into())
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Num)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    pub rows: usize,
    /// Defaults and modelling choices behind the numbers.
    pub labels: BTreeMap<String, String>,
    pub config: ExperimentConfig,
    /// Not written, so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub metadata: Metadata,
}

impl ExperimentResult {
    fn new(name: &str, columns: &[&str], rows: Vec<Vec<Cell>>, ctx: &Context, started: Instant) -> Self {
        let columns: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        debug_assert!(rows.iter().all(|r| r.len() == columns.len()));
        let metadata = Metadata {
            experiment: name.into(),
            config_hash: ctx.hash.clone(),
            seeds: vec![ctx.config.seed],
            columns: columns.clone(),
            rows: rows.len(),
            labels: ctx.labels.clone(),
            config: ctx.config.clone(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        Self { name: name.into(), columns, rows, metadata }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column, `None` for empty or text cells.
    pub fn numbers(&self, name: &str) -> Vec<Option<f64>> {
        let Some(i) = self.column(name) else { return Vec::new() };
        self.rows.iter().map(|r| if let Cell::Num(x) = r[i] { Some(x) } else { None }).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.columns).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string())).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv encoding: {e}")))
    }

    /// Write `<name>.csv` and `<name>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.name));
        let json_path = dir.join(format!("{}.json", self.name));
        std::fs::write(&csv_path, self.to_csv()?)?;
        std::fs::write(&json_path, serde_json::to_string_pretty(&self.metadata)? + "\n")?;
        Ok((csv_path, json_path))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Row status for a failed synthesis.
pub fn status_of(err: &Error) -> &'static str {
    match err {
        Error::InfeasibleConfig(_) => "infeasible",
        Error::NotConverged(_) => "not_converged",
        Error::LineSearchStall { .. } => "line_search_stall",
        _ => "error",
    }
}

/// Failures that mark a sweep row instead of aborting the sweep.
pub fn is_solver_failure(err: &Error) -> bool {
    matches!(err, Error::InfeasibleConfig(_) | Error::NotConverged(_) | Error::LineSearchStall { .. })
}

/// Shared, `ε`-independent state of a run.
struct Context {
    config: ExperimentConfig,
    model: SystemModel,
    design: KalmanDesign,
    alpha: f64,
    hash: String,
    labels: BTreeMap<String, String>,
}

impl Context {
    fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = config.load_model()?;
        let design = estimation::solve_dare(&model)?;
        let alpha = detector::threshold_alpha(config.target_far, model.ny())?;
        let mut labels = BTreeMap::new();
        labels.insert("structure".into(), config.structure_label());
        labels.insert("horizon".into(), config.horizon.to_string());
        labels.insert("model".into(), config.model.as_ref().map_or("bundled reactor".into(), |p| p.display().to_string()));
        labels.insert("cap".into(), format!("{} (applied only when the detection constraint is absent)", config.cap));
        labels.insert("sigma_min".into(), synthesis::DEFAULT_SIGMA_MIN.to_string());
        labels.insert("units".into(), "nats".into());
        Ok(Self { hash: config.hash(&model)?, config: config.clone(), model, design, alpha, labels })
    }

    fn label(mut self, key: &str, value: impl Into<String>) -> Self {
        self.labels.insert(key.into(), value.into());
        self
    }

    fn assemble(&self, epsilon: f64) -> Result<SynthesisProblem> {
        synthesis::assemble(&self.model, &self.config.spec(epsilon))
    }

    /// Synthesized mechanism at `ε`, or no distortion at `ε = 0`.
    fn mechanism(&self, epsilon: f64) -> Result<Mechanism> {
        if epsilon == 0.0 {
            let (k, ny, nu) = (self.config.horizon, self.model.ny(), self.model.nu());
            return Ok(Mechanism {
                sigma_v: DMatrix::zeros(k * ny, k * ny),
                sigma_j: DMatrix::zeros((k - 1) * nu, (k - 1) * nu),
                design: None,
            });
        }
        let problem = self.assemble(epsilon)?;
        let design = synthesis::solve(&problem, &self.config.solver)?;
        Ok(Mechanism { sigma_v: design.sigma_v.clone(), sigma_j: design.sigma_j.clone(), design: Some(design) })
    }

    fn distorted_covs(&self, m: &Mechanism) -> Result<Vec<DMatrix<f64>>> {
        let (k, ny, nu) = (self.config.horizon, self.model.ny(), self.model.nu());
        (0..k)
            .map(|step| {
                let v = linalg::diag_block(&m.sigma_v, step, ny);
                let j = if step + 1 < k { linalg::diag_block(&m.sigma_j, step, nu) } else { DMatrix::zeros(nu, nu) };
                estimation::distorted_residual_cov(&self.design, &self.model, &v, &j)
            })
            .collect()
    }

    fn fault_shift(&self, delta: f64) -> Result<DVector<f64>> {
        estimation::fault_residual_mean(&self.model, &self.design, &DVector::from_element(self.model.n_delta(), delta))
    }

    fn zero_inputs(&self) -> Vec<DVector<f64>> {
        vec![DVector::zeros(self.model.nu()); self.config.horizon - 1]
    }
}

struct Mechanism {
    sigma_v: DMatrix<f64>,
    sigma_j: DMatrix<f64>,
    design: Option<MechanismDesign>,
}

impl Mechanism {
    fn status(&self) -> &'static str {
        if self.design.is_some() {
            "converged"
        } else {
            "undistorted"
        }
    }
}

/// Optimal leakage for each `ε`; failed rows keep their status and leave the numbers empty.
pub fn run_cost_vs_epsilon(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let started = Instant::now();
    let ctx = Context::new(config)?;
    let rows = config
        .epsilons
        .par_iter()
        .map(|&eps| {
            let solved = ctx.assemble(eps).and_then(|p| synthesis::solve(&p, &config.solver));
            Ok(match solved {
                Ok(d) => vec![
                    eps.into(),
                    "converged".into(),
                    d.cost.into(),
                    d.mutual_information.into(),
                    d.iterations.into(),
                    d.min_margin().into(),
                    d.beta_star.into(),
                    d.cap.into(),
                ],
                Err(e) if is_solver_failure(&e) => failed_row(eps, status_of(&e), 6),
                Err(e) => return Err(e),
            })
        })
        .collect::<Result<_>>()?;
    let columns = ["epsilon", "status", "cost", "mutual_information", "iterations", "min_margin", "beta_star", "cap"];
    Ok(ExperimentResult::new("cost_vs_epsilon", &columns, rows, &ctx, started))
}

/// One simulated run per `ε`: measurement, disclosed measurement, private
/// output and the adversary's MMSE estimates from clean and distorted data.
pub fn run_trajectory_comparison(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let started = Instant::now();
    let ctx = Context::new(config)?.label("inputs", "50 cos^2(0.5 k) on every input channel");
    let (k, ny, ns) = (config.horizon, ctx.model.ny(), ctx.model.ns());
    let inputs: Vec<DVector<f64>> = (1..k)
        .map(|i| DVector::from_element(ctx.model.nu(), 50.0 * (0.5 * i as f64).cos().powi(2)))
        .collect();
    let lifted = lifted::build_lifted(&ctx.model, k)?;
    // one plant realization shared by every ε, so only the mechanism differs
    let traj = crate::model::simulate(&ctx.model, k, &inputs, None, config.seed)?;
    let y = linalg::stack(&traj.measurements);
    let clean = estimator(&lifted, &ctx.model, &inputs, &DMatrix::zeros(k * ny, k * ny))?;
    let s_clean = clean.s_hat(&y);

    let blocks: Vec<Vec<Vec<Cell>>> = config
        .epsilons
        .par_iter()
        .map(|&eps| -> Result<Vec<Vec<Cell>>> {
            let m = match ctx.mechanism(eps) {
                Ok(m) => m,
                Err(e) if is_solver_failure(&e) => {
                    return Ok(vec![failed_row(eps, status_of(&e), 8)]);
                }
                Err(e) => return Err(e),
            };
            let dist = MechanismSampler::new(&m.sigma_v, &m.sigma_j)?.apply(&traj, config.seed)?;
            let y_tilde = linalg::stack(&dist.y_tilde);
            let est = estimator(&lifted, &ctx.model, &inputs, &m.sigma_v)?;
            let s_dist = est.s_hat(&y_tilde);
            Ok((0..k)
                .map(|step| {
                    let mse = |e: &MmseEstimator| linalg::diag_block(e.error_cov(), step, ns).trace();
                    vec![
                        eps.into(),
                        m.status().into(),
                        (step + 1).into(),
                        traj.measurements[step][0].into(),
                        dist.y_tilde[step][0].into(),
                        traj.private[step][0].into(),
                        s_clean[step * ns].into(),
                        s_dist[step * ns].into(),
                        mse(&clean).into(),
                        mse(&est).into(),
                    ]
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let columns = ["epsilon", "status", "k", "y1", "ytilde1", "s", "s_hat_clean", "s_hat_distorted", "mse_clean", "mse_distorted"];
    Ok(ExperimentResult::new("trajectory", &columns, blocks.concat(), &ctx, started))
}

fn failed_row(eps: f64, status: &str, empties: usize) -> Vec<Cell> {
    let mut row = vec![eps.into(), status.into()];
    row.extend(std::iter::repeat_n(Cell::Empty, empties));
    row
}

fn estimator(lifted: &LiftedSystem, model: &SystemModel, inputs: &[DVector<f64>], sigma_v: &DMatrix<f64>) -> Result<MmseEstimator> {
    let law = lifted::joint_law(lifted, model, inputs, sigma_v)?;
    MmseEstimator::new(&law.mean_s, &law.mean_y, &law.sigma_s, &law.sigma_sy, &law.sigma_y)
}

/// Analytic and closed-loop false-alarm rates against the bound `𝒜* + ε`.
pub fn run_far_sweep(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let started = Instant::now();
    let ctx = Context::new(config)?
        .label("far_analytic", "gamma approximation averaged over the horizon")
        .label("far_empirical", "closed-loop runs with zero inputs (residuals do not depend on inputs)")
        .label("within_bound", "far_empirical <= bound + 3 stderr");
    let rows = config
        .epsilons
        .par_iter()
        .enumerate()
        .map(|(i, &eps)| -> Result<Vec<Cell>> {
            let m = match ctx.mechanism(eps) {
                Ok(m) => m,
                Err(e) if is_solver_failure(&e) => {
                    return Ok(failed_row(eps, status_of(&e), 5));
                }
                Err(e) => return Err(e),
            };
            let covs = ctx.distorted_covs(&m)?;
            let analytic = covs
                .iter()
                .map(|st| detector::false_alarm_rate_analytic(st, &ctx.design.sigma_r, ctx.alpha))
                .sum::<Result<f64>>()?
                / covs.len() as f64;
            let emp = detector::empirical_alarm_rate(
                &ctx.model,
                &ctx.design,
                &m.sigma_v,
                &m.sigma_j,
                &ctx.zero_inputs(),
                None,
                ctx.alpha,
                config.runs,
                rng::sub_seed(config.seed, i as u64),
            )?;
            let bound = (config.target_far + eps).min(1.0);
            let ok = emp.rate <= bound + 3.0 * emp.stderr;
            Ok(vec![
                eps.into(),
                m.status().into(),
                analytic.into(),
                emp.rate.into(),
                emp.stderr.into(),
                bound.into(),
                (ok as usize).into(),
            ])
        })
        .collect::<Result<_>>()?;
    let columns = ["epsilon", "status", "far_analytic", "far_empirical", "far_stderr", "bound", "within_bound"];
    Ok(ExperimentResult::new("far_sweep", &columns, rows, &ctx, started))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionStudy {
    /// Detection rate against the fault magnitude for each `ε`.
    pub detection: ExperimentResult,
    /// ROC points per `(δ, ε)`, with the marked point flagged.
    pub roc: ExperimentResult,
    pub auc: ExperimentResult,
}

/// Averages the per-step curves of a horizon; the steps use independent draws.
fn average_curves(curves: &[RocCurve]) -> RocCurve {
    let n = curves.len() as f64;
    let points = (0..curves[0].points.len())
        .map(|i| {
            let pts: Vec<&RocPoint> = curves.iter().map(|c| &c.points[i]).collect();
            let mean = |f: fn(&RocPoint) -> f64| pts.iter().map(|p| f(p)).sum::<f64>() / n;
            let pooled = |f: fn(&RocPoint) -> f64| pts.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt() / n;
            RocPoint {
                target_far: pts[0].target_far,
                alpha: pts[0].alpha,
                far: mean(|p| p.far),
                det_rate: mean(|p| p.det_rate),
                far_stderr: pooled(|p| p.far_stderr),
                det_stderr: pooled(|p| p.det_stderr),
            }
        })
        .collect();
    RocCurve { points }
}

/// Detection rates and ROC curves of the synthesized mechanisms under a
/// constant fault. Rates are averaged over the horizon; `ε = 0` is exact.
pub fn run_detection_and_roc(config: &ExperimentConfig) -> Result<DetectionStudy> {
    let started = Instant::now();
    let ctx = Context::new(config)?
        .label("fault_shift", "steady-state residual shift of a constant fault")
        .label("rates", "per-step Monte Carlo rates averaged over the horizon; epsilon = 0 is exact");
    let mut far_grid = config.far_grid.clone();
    if !far_grid.contains(&config.marked_far) {
        far_grid.push(config.marked_far);
        far_grid.sort_by(f64::total_cmp);
    }

    let mechanisms: Vec<Result<(Mechanism, Vec<DMatrix<f64>>)>> = config
        .epsilons
        .par_iter()
        .map(|&eps| {
            let m = ctx.mechanism(eps)?;
            let covs = ctx.distorted_covs(&m)?;
            Ok((m, covs))
        })
        .collect();
    let shifts = config.fault.deltas.iter().map(|&d| ctx.fault_shift(d)).collect::<Result<Vec<_>>>()?;
    let sr = &ctx.design.sigma_r;
    let samples = config.samples;
    let step_seed = |step: usize| rng::sub_seed(config.seed, step as u64);

    type Outcome = std::result::Result<(Vec<Cell>, RocCurve), &'static str>;
    let cells: Vec<(f64, f64, Outcome)> = shifts
        .iter()
        .zip(&config.fault.deltas)
        .flat_map(|(shift, &delta)| config.epsilons.iter().zip(&mechanisms).map(move |(&eps, m)| (shift, delta, eps, m)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(shift, delta, eps, m)| -> Result<(f64, f64, Outcome)> {
            let out = match m {
                Err(e) if is_solver_failure(e) => Err(status_of(e)),
                Err(e) => return Err(Error::Config(format!("epsilon {eps}: {e}"))),
                Ok((mech, _)) if mech.design.is_none() => {
                    let det = detector::detection_rate_no_privacy(shift, sr, ctx.alpha)?;
                    let roc = detector::roc_curve_no_privacy(shift, sr, &far_grid)?;
                    Ok((vec![delta.into(), eps.into(), mech.status().into(), det.into(), 0.0.into()], roc))
                }
                Ok((mech, covs)) => {
                    let per_step = covs
                        .iter()
                        .enumerate()
                        .map(|(k, st)| detector::detection_rate_with_privacy(shift, st, sr, ctx.alpha, samples, step_seed(k)))
                        .collect::<Result<Vec<_>>>()?;
                    let n = per_step.len() as f64;
                    let det = per_step.iter().map(|e| e.value).sum::<f64>() / n;
                    let se = per_step.iter().map(|e| e.stderr.powi(2)).sum::<f64>().sqrt() / n;
                    let curves = covs
                        .iter()
                        .enumerate()
                        .map(|(k, st)| detector::roc_curve(shift, st, sr, &far_grid, samples, step_seed(k)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((vec![delta.into(), eps.into(), mech.status().into(), det.into(), se.into()], average_curves(&curves)))
                }
            };
            Ok((delta, eps, out))
        })
        .collect::<Result<_>>()?;

    let mut detection = Vec::new();
    let mut roc = Vec::new();
    let mut auc = Vec::new();
    for (delta, eps, out) in cells {
        match out {
            Ok((row, curve)) => {
                let status = row[2].clone();
                detection.push(row);
                auc.push(vec![delta.into(), eps.into(), status.clone(), curve.auc().into(), curve.auc_stderr().into()]);
                for p in &curve.points {
                    roc.push(vec![
                        delta.into(),
                        eps.into(),
                        status.clone(),
                        p.target_far.into(),
                        p.alpha.into(),
                        p.far.into(),
                        p.det_rate.into(),
                        p.far_stderr.into(),
                        p.det_stderr.into(),
                        ((p.target_far == config.marked_far) as usize).into(),
                    ]);
                }
            }
            Err(status) => {
                detection.push(vec![delta.into(), eps.into(), status.into(), Cell::Empty, Cell::Empty]);
                auc.push(vec![delta.into(), eps.into(), status.into(), Cell::Empty, Cell::Empty]);
            }
        }
    }
    Ok(DetectionStudy {
        detection: ExperimentResult::new("detection_rate", &["delta", "epsilon", "status", "det_rate", "det_stderr"], detection, &ctx, started),
        roc: ExperimentResult::new(
            "roc",
            &["delta", "epsilon", "status", "target_far", "alpha", "far", "det_rate", "far_stderr", "det_stderr", "marked"],
            roc,
            &ctx,
            started,
        ),
        auc: ExperimentResult::new("auc", &["delta", "epsilon", "status", "auc", "auc_stderr"], auc, &ctx, started),
    })
}
