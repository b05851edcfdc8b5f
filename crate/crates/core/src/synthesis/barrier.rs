//! Damped-Newton barrier method for weighted log-det programs.
//!
//! Minimizes `Σ_t (a_t + b_t μ) · (-log det F_t(x))` over `x`, where each
//! `F_t(x) = F_t0 + Σ_i x_i F_ti` is an affine symmetric matrix function, and
//! drives `μ → 0`. Terms with `a_t > 0` carry the objective, terms with
//! `b_t = 1` are barriers for `F_t(x) ≻ 0`.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Triplet {
    pub r: usize,
    pub c: usize,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub name: String,
    pub f0: DMatrix<f64>,
    /// `(variable index, entries of F_ti)` with both triangles stored.
    pub vars: Vec<(usize, Vec<Triplet>)>,
    pub objective_weight: f64,
    pub barrier: bool,
}

impl Term {
    pub fn dim(&self) -> usize {
        self.f0.nrows()
    }

    fn weight(&self, mu: f64) -> f64 {
        self.objective_weight + if self.barrier { mu } else { 0.0 }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (i, entries) in &self.vars {
            let xi = x[*i];
            if xi != 0.0 {
                for t in entries {
                    f[(t.r, t.c)] += xi * t.v;
                }
            }
        }
        f
    }
}

/// Incremental construction of a [`Term`].
pub(crate) struct TermBuilder {
    name: String,
    f0: DMatrix<f64>,
    vars: BTreeMap<usize, Vec<Triplet>>,
    objective_weight: f64,
    barrier: bool,
}

impl TermBuilder {
    pub fn new(name: impl Into<String>, f0: DMatrix<f64>) -> Self {
        Self { name: name.into(), f0, vars: BTreeMap::new(), objective_weight: 0.0, barrier: true }
    }

    pub fn objective(mut self, weight: f64, barrier: bool) -> Self {
        self.objective_weight = weight;
        self.barrier = barrier;
        self
    }

    pub fn push(&mut self, var: usize, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.vars.entry(var).or_default().push(Triplet { r, c, v });
        }
    }

    pub fn build(self) -> Term {
        Term {
            name: self.name,
            f0: self.f0,
            vars: self.vars.into_iter().collect(),
            objective_weight: self.objective_weight,
            barrier: self.barrier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub mu0: f64,
    pub mu_factor: f64,
    /// Stop once `m_total · μ` falls below this value.
    pub gap_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Centering stops when half the squared Newton decrement is below this.
    pub newton_tol: f64,
    pub armijo: f64,
    pub backtrack: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            mu_factor: 10.0,
            gap_tol: 1e-6,
            max_outer: 50,
            max_inner: 200,
            newton_tol: 1e-9,
            armijo: 0.3,
            backtrack: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub mu: f64,
    /// Objective part `Σ a_t (-log det F_t)` at the end of the stage.
    pub objective: f64,
    pub newton_steps: usize,
    /// Penalized value after every accepted step of this stage.
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BarrierResult {
    pub x: Vec<f64>,
    pub stages: Vec<StageRecord>,
    pub newton_steps: usize,
    pub final_mu: f64,
}

pub(crate) struct Program {
    pub n: usize,
    pub terms: Vec<Term>,
}

impl Program {
    fn barrier_dim(&self) -> usize {
        self.terms.iter().filter(|t| t.barrier).map(Term::dim).sum()
    }

    fn factors(&self, x: &[f64]) -> Option<Vec<Cholesky<f64, Dyn>>> {
        self.terms.iter().map(|t| Cholesky::new(t.eval(x))).collect()
    }

    pub fn infeasible_term(&self, x: &[f64]) -> Option<&str> {
        self.terms.iter().find(|t| Cholesky::new(t.eval(x)).is_none()).map(|t| t.name.as_str())
    }

    fn logdets(factors: &[Cholesky<f64, Dyn>]) -> Vec<f64> {
        factors.iter().map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()).collect()
    }

    /// Penalized value, or `None` outside the domain.
    fn value(&self, x: &[f64], mu: f64) -> Option<f64> {
        let f = self.factors(x)?;
        Some(self.terms.iter().zip(Self::logdets(&f)).map(|(t, ld)| -t.weight(mu) * ld).sum())
    }

    pub fn objective(&self, x: &[f64]) -> Option<f64> {
        let f = self.factors(x)?;
        Some(self.terms.iter().zip(Self::logdets(&f)).map(|(t, ld)| -t.objective_weight * ld).sum())
    }

    fn gradient_hessian(&self, x: &[f64], mu: f64) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut g = DVector::zeros(self.n);
        let mut h = DMatrix::zeros(self.n, self.n);
        for term in &self.terms {
            let w = term.weight(mu);
            if w == 0.0 {
                continue;
            }
            let inv = Cholesky::new(term.eval(x))?.inverse();
            for (a, (gi, ti)) in term.vars.iter().enumerate() {
                g[*gi] -= w * ti.iter().map(|t| t.v * inv[(t.c, t.r)]).sum::<f64>();
                for (gj, tj) in &term.vars[a..] {
                    let mut s = 0.0;
                    for p in ti {
                        for q in tj {
                            s += p.v * q.v * inv[(p.c, q.r)] * inv[(q.c, p.r)];
                        }
                    }
                    h[(*gi, *gj)] += w * s;
                    if gi != gj {
                        h[(*gj, *gi)] += w * s;
                    }
                }
            }
        }
        Some((g, h))
    }

    /// Newton direction from a Jacobi-scaled Cholesky solve.
    fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
        let n = g.len();
        let d = DVector::from_fn(n, |i, _| {
            let hii = h[(i, i)];
            if hii > 0.0 {
                1.0 / hii.sqrt()
            } else {
                1.0
            }
        });
        let mut scaled = DMatrix::from_fn(n, n, |i, j| d[i] * h[(i, j)] * d[j]);
        let rhs = -g.component_mul(&d);
        let mut shift = 0.0;
        for _ in 0..20 {
            if let Some(chol) = Cholesky::new(scaled.clone()) {
                return Some(chol.solve(&rhs).component_mul(&d));
            }
            let bump = if shift == 0.0 { 1e-12 } else { shift * 9.0 };
            for i in 0..n {
                scaled[(i, i)] += bump;
            }
            shift += bump;
        }
        None
    }

    pub fn minimize(&self, x0: Vec<f64>, opts: &SolverOptions) -> Result<BarrierResult> {
        if let Some(name) = self.infeasible_term(&x0) {
            return Err(Error::InfeasibleConfig(format!("initial point violates `{name}`")));
        }
        let m_total = self.barrier_dim().max(1) as f64;
        let mut x = x0;
        let mut mu = opts.mu0;
        let mut stages = Vec::new();
        let mut newton_steps = 0;
        for _ in 0..opts.max_outer {
            let record = self.center(&mut x, mu, opts)?;
            newton_steps += record.newton_steps;
            stages.push(record);
            if m_total * mu < opts.gap_tol {
                return Ok(BarrierResult { x, stages, newton_steps, final_mu: mu });
            }
            mu /= opts.mu_factor;
        }
        Err(Error::NotConverged(format!("barrier parameter still {mu:e} after {} outer stages", opts.max_outer)))
    }

    fn center(&self, x: &mut Vec<f64>, mu: f64, opts: &SolverOptions) -> Result<StageRecord> {
        let mut value = self.value(x, mu).expect("iterate stays feasible");
        let mut values = Vec::new();
        for step in 0..opts.max_inner {
            let (g, h) = self.gradient_hessian(x, mu).expect("iterate stays feasible");
            let dx = Self::newton_direction(&g, &h)
                .ok_or_else(|| Error::NotConverged("Newton system could not be factorized".into()))?;
            let slope = g.dot(&dx);
            let decrement = -slope;
            if decrement / 2.0 <= opts.newton_tol {
                return Ok(self.stage(x, mu, step, values));
            }
            let mut t = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(xi, di)| xi + t * di).collect();
                if let Some(v) = self.value(&trial, mu) {
                    if v <= value + opts.armijo * t * slope {
                        break Some((trial, v));
                    }
                }
                t *= opts.backtrack;
                if t < 1e-12 {
                    break None;
                }
            };
            match accepted {
                Some((trial, v)) => {
                    *x = trial;
                    value = v;
                    values.push(v);
                }
                // round-off floor: the point is centered as far as double precision allows
                None if decrement / 2.0 < 1e-6 => return Ok(self.stage(x, mu, step, values)),
                None => return Err(Error::LineSearchStall { mu, decrement }),
            }
        }
        Err(Error::NotConverged(format!("centering at mu = {mu:e} exceeded {} Newton steps", opts.max_inner)))
    }

    fn stage(&self, x: &[f64], mu: f64, steps: usize, values: Vec<f64>) -> StageRecord {
        StageRecord { mu, objective: self.objective(x).expect("feasible"), newton_steps: steps, values }
    }
}
