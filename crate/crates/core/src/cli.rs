//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 on a configuration or usage error, 3 when the
//! solver fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::estimation;
use crate::experiments::{self, ExperimentConfig, ExperimentResult};
use crate::model::{self, SystemModel};
use crate::synthesis::{self, SolverOptions, Structure, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "privdet", version, about = "Privacy mechanism synthesis and chi-squared detector analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the model assumptions (stabilizability, detectability, rank, PD covariances).
    Validate(Common),
    /// Steady-state Kalman gain and residual covariance.
    Dare(Common),
    /// Solve for the optimal mechanism and verify it; writes mechanism.json and verification.json.
    Synthesize(Common),
    /// Optimal leakage over an epsilon grid.
    SweepCost(Common),
    /// Analytic and empirical false-alarm rates over an epsilon grid.
    SweepFar(Common),
    /// Detection rate against the fault magnitude.
    Detection(Common),
    /// ROC curves and their areas per fault magnitude and epsilon.
    Roc(Common),
    /// One simulated trajectory per epsilon with the adversary's estimates.
    Trajectory(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StructureArg {
    Full,
    Block,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Model JSON file (bundled reactor when omitted).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Horizon.
    #[arg(long = "K", default_value_t = 10)]
    k: usize,
    /// Target false-alarm rate of the undistorted detector.
    #[arg(long, default_value_t = 0.1)]
    far: f64,
    /// Distortion level for `synthesize`.
    #[arg(long, default_value_t = 0.3)]
    eps: f64,
    /// Comma-separated epsilon values for the sweeps.
    #[arg(long = "eps-grid", value_delimiter = ',')]
    eps_grid: Option<Vec<f64>>,
    /// Comma-separated fault magnitudes.
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    /// Monte Carlo draws per estimate (and closed-loop runs).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = StructureArg::Full)]
    structure: StructureArg,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Slack on the per-step detection constraints.
    #[arg(long)]
    margin: Option<f64>,
    /// Covariance cap used when the detection constraint is absent.
    #[arg(long, default_value_t = synthesis::DEFAULT_CAP)]
    cap: f64,
}

impl Common {
    fn load_model(&self) -> Result<SystemModel> {
        match &self.model {
            Some(p) => SystemModel::load(p),
            None => Ok(SystemModel::reactor()),
        }
    }

    fn config(&self, default_grid: &[f64]) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        let samples = self.samples.unwrap_or(base.samples);
        ExperimentConfig {
            model: self.model.clone(),
            horizon: self.k,
            target_far: self.far,
            epsilons: self.eps_grid.clone().unwrap_or_else(|| default_grid.to_vec()),
            fault: experiments::FaultSpec { deltas: self.delta.clone().unwrap_or(base.fault.deltas), g: None, h: None },
            seed: self.seed,
            samples,
            runs: self.samples.unwrap_or(base.runs),
            structure: self.structure(),
            margin: self.margin,
            cap: self.cap,
            ..base
        }
    }

    fn structure(&self) -> Structure {
        match self.structure {
            StructureArg::Full => Structure::Full,
            StructureArg::Block => Structure::BlockDiagonal,
        }
    }
}

/// Exit code for an error: solver failures are 3, everything else a configuration problem.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotConverged(_) | Error::LineSearchStall { .. } | Error::NoConvergence { .. } => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let started = Instant::now();
    match dispatch(cli.command, out) {
        Ok(code) => {
            let _ = writeln!(err, "done in {:.2} s", started.elapsed().as_secs_f64());
            code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(result: &ExperimentResult, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let (csv, json) = result.write(dir)?;
    writeln!(out, "wrote {} ({} rows) and {}", csv.display(), result.rows.len(), json.display())?;
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Validate(c) => {
            let report = model::validate_model(&c.load_model()?)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            Ok(if report.all_passed() { EXIT_OK } else { EXIT_CONFIG })
        }
        Command::Dare(c) => {
            let design = estimation::solve_dare(&c.load_model()?)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&design)?)?;
            Ok(EXIT_OK)
        }
        Command::Synthesize(c) => {
            let model = c.load_model()?;
            let mut spec = synthesis::ProblemSpec::new(c.k, c.far, c.eps).with_structure(c.structure());
            spec.margin = c.margin;
            spec.cap = c.cap;
            let problem = synthesis::assemble(&model, &spec)?;
            let design = synthesis::solve(&problem, &SolverOptions::default())?;
            let runs = c.samples.unwrap_or(VerifyOptions::default().runs);
            let report = synthesis::verify(&design, &problem, &VerifyOptions { runs, seed: c.seed, ..Default::default() })?;
            std::fs::create_dir_all(&c.out)?;
            std::fs::write(c.out.join("mechanism.json"), design.to_json()? + "\n")?;
            std::fs::write(c.out.join("verification.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            writeln!(
                out,
                "cost {:.6} nats, {} Newton steps, min margin {}, verification {}",
                design.cost,
                design.iterations,
                design.min_margin().map_or("n/a (unconstrained)".into(), |m| format!("{m:e}")),
                if report.all_passed() { "passed" } else { "FAILED" }
            )?;
            Ok(EXIT_OK)
        }
        Command::SweepCost(c) => {
            let grid: Vec<f64> = (1..=8).map(|i| i as f64 / 10.0).collect();
            emit(&experiments::run_cost_vs_epsilon(&c.config(&grid))?, &c.out, out)?;
            Ok(EXIT_OK)
        }
        Command::SweepFar(c) => {
            let grid: Vec<f64> = (0..=8).map(|i| i as f64 / 10.0).collect();
            emit(&experiments::run_far_sweep(&c.config(&grid))?, &c.out, out)?;
            Ok(EXIT_OK)
        }
        Command::Detection(c) => {
            let study = experiments::run_detection_and_roc(&c.config(&[0.0, 0.1, 0.3, 0.5]))?;
            emit(&study.detection, &c.out, out)?;
            Ok(EXIT_OK)
        }
        Command::Roc(c) => {
            let study = experiments::run_detection_and_roc(&c.config(&[0.0, 0.1, 0.3, 0.5]))?;
            emit(&study.roc, &c.out, out)?;
            emit(&study.auc, &c.out, out)?;
            Ok(EXIT_OK)
        }
        Command::Trajectory(c) => {
            emit(&experiments::run_trajectory_comparison(&c.config(&[0.0, 0.1, 0.75, 0.9]))?, &c.out, out)?;
            Ok(EXIT_OK)
        }
    }
}
