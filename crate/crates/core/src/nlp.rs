//! Smooth constrained minimization.
//!
//! Problems have the form
//!
//! ```text
//! min f(z)   s.t.   c(z) ≤ 0,   lower ≤ z ≤ upper
//! ```
//!
//! The inequality constraints are handled by an augmented-Lagrangian outer
//! loop; each subproblem is solved by a projected limited-memory BFGS
//! iteration with backtracking (Armijo) line search. Gradients are central
//! finite differences, so only function values are required.

use std::collections::VecDeque;
use std::fmt;

use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::model::BoxSet;

/// A nonlinear program `min f(z) s.t. c(z) ≤ 0, z ∈ bounds`.
pub trait Problem {
    fn dim(&self) -> usize;

    fn num_constraints(&self) -> usize;

    fn objective(&self, z: &[f64]) -> f64;

    /// Writes `c(z)` into `out` (length [`Problem::num_constraints`]).
    fn constraints(&self, z: &[f64], out: &mut [f64]);

    /// Hard bounds on the decision variables.
    fn bounds(&self) -> Option<&BoxSet> {
        None
    }

    /// Objective and constraints in one pass. Override when they share work.
    fn evaluate(&self, z: &[f64], cons: &mut [f64]) -> f64 {
        self.constraints(z, cons);
        self.objective(z)
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A [`Problem`] assembled from closures.
pub struct FnProblem {
    dim: usize,
    num_constraints: usize,
    objective: ScalarFn,
    constraints: Option<VectorFn>,
    bounds: Option<BoxSet>,
}

impl FnProblem {
    pub fn unconstrained<F>(dim: usize, objective: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            num_constraints: 0,
            objective: Box::new(objective),
            constraints: None,
            bounds: None,
        }
    }

    pub fn with_constraints<G>(mut self, count: usize, constraints: G) -> Self
    where
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.num_constraints = count;
        self.constraints = Some(Box::new(constraints));
        self
    }

    pub fn with_bounds(mut self, bounds: BoxSet) -> Self {
        self.bounds = Some(bounds);
        self
    }
}

impl Problem for FnProblem {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    fn objective(&self, z: &[f64]) -> f64 {
        (self.objective)(z)
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        if let Some(c) = &self.constraints {
            c(z, out)
        }
    }

    fn bounds(&self) -> Option<&BoxSet> {
        self.bounds.as_ref()
    }
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Allowed constraint violation.
    pub feastol: f64,
    /// Tolerance on the sup norm of the projected gradient.
    pub opttol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// `|s| → sqrt(s² + δ²)` inside model evaluations during solves; 0 keeps `|s|`.
    pub smooth_abs_delta: f64,
    /// L-BFGS memory length.
    pub memory: usize,
    pub armijo: f64,
    /// Weight of the ℓ₁ violation in the logged outer-loop merit.
    pub merit_weight: f64,
    /// Keep per-outer-iteration records in [`NlpResult::trace`].
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-6,
            feastol: 1e-6,
            opttol: 1e-5,
            max_outer: 50,
            max_inner: 500,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e12,
            smooth_abs_delta: 0.0,
            memory: 10,
            armijo: 1e-4,
            merit_weight: 1e3,
            record_trace: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fd_step", self.fd_step),
            ("feastol", self.feastol),
            ("opttol", self.opttol),
            ("penalty_init", self.penalty_init),
            ("armijo", self.armijo),
            ("merit_weight", self.merit_weight),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ContractViolation(format!(
                    "solver option {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::ContractViolation(format!(
                "penalty_growth must exceed 1, got {}",
                self.penalty_growth
            )));
        }
        if !(self.penalty_max >= self.penalty_init) {
            return Err(Error::ContractViolation(
                "penalty_max must be at least penalty_init".into(),
            ));
        }
        if !(self.smooth_abs_delta >= 0.0) {
            return Err(Error::ContractViolation("smooth_abs_delta must be non-negative".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 || self.memory == 0 {
            return Err(Error::ContractViolation(
                "iteration budgets and memory must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Same options with feasibility and optimality tolerances divided by `factor`.
    pub fn tightened(&self, factor: f64) -> Self {
        Self {
            feastol: self.feastol / factor,
            opttol: self.opttol / factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
    BudgetExhausted,
}

impl SolveStatus {
    /// Optimal or feasible-suboptimal.
    pub fn is_feasible(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "feasible-suboptimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::BudgetExhausted => "budget-exhausted",
        }
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Iterations {
    pub outer: usize,
    pub inner: usize,
    pub evaluations: usize,
}

/// One outer iteration of the augmented-Lagrangian loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OuterRecord {
    pub outer: usize,
    /// Inner iterations spent on this subproblem.
    pub inner: usize,
    pub objective: f64,
    pub violation: f64,
    pub penalty: f64,
    /// `f + merit_weight · Σ max(0, cᵢ)`.
    pub merit: f64,
    /// Whether the merit did not increase over the last accepted iterate.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpResult {
    pub z_star: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub max_violation: f64,
    /// Sup norm of the projected Lagrangian gradient.
    pub stationarity: f64,
    pub multipliers: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: Iterations,
    pub trace: Vec<OuterRecord>,
}

/// Central-difference gradient of `f` at `z`.
///
/// The step for component `i` is `step · max(1, |zᵢ|)`.
pub fn gradient_fd<F>(f: F, z: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut g = vec![0.0; z.len()];
    let mut work = z.to_vec();
    fd_into(&f, &mut work, step, &mut g)?;
    Ok(g)
}

/// Forward-difference gradient, used to cross-check [`gradient_fd`].
pub fn gradient_forward<F>(f: F, z: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let f0 = f(z);
    let mut work = z.to_vec();
    let mut g = vec![0.0; z.len()];
    for i in 0..z.len() {
        let h = step * z[i].abs().max(1.0);
        work[i] = z[i] + h;
        let fp = f(&work);
        work[i] = z[i];
        if !(fp.is_finite() && f0.is_finite()) {
            return Err(Error::NonFiniteSample { component: i });
        }
        g[i] = (fp - f0) / h;
    }
    Ok(g)
}

fn fd_into<F>(f: &F, work: &mut [f64], step: f64, g: &mut [f64]) -> Result<()>
where
    F: Fn(&[f64]) -> f64,
{
    for i in 0..work.len() {
        let zi = work[i];
        let h = step * zi.abs().max(1.0);
        work[i] = zi + h;
        let fp = f(work);
        work[i] = zi - h;
        let fm = f(work);
        work[i] = zi;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFiniteSample { component: i });
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(())
}

fn max_violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0_f64, |acc, v| acc.max(*v))
}

fn l1_violation(c: &[f64]) -> f64 {
    c.iter().map(|v| v.max(0.0)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

struct Bounds<'a> {
    lower: Option<&'a [f64]>,
    upper: Option<&'a [f64]>,
}

impl Bounds<'_> {
    fn project(&self, z: &mut [f64]) {
        if let (Some(lo), Some(hi)) = (self.lower, self.upper) {
            for ((v, l), h) in z.iter_mut().zip(lo).zip(hi) {
                *v = v.clamp(*l, *h);
            }
        }
    }

    /// Zeroes gradient components pinned against a bound.
    fn project_gradient(&self, z: &[f64], g: &mut [f64]) {
        if let (Some(lo), Some(hi)) = (self.lower, self.upper) {
            for i in 0..z.len() {
                if (z[i] <= lo[i] && g[i] > 0.0) || (z[i] >= hi[i] && g[i] < 0.0) {
                    g[i] = 0.0;
                }
            }
        }
    }
}

/// The augmented Lagrangian `f + (1/2μ) Σ (max(0, λᵢ + μcᵢ)² − λᵢ²)`.
struct Augmented<'a, P: Problem + ?Sized> {
    problem: &'a P,
    lambda: &'a [f64],
    mu: f64,
    cons: std::cell::RefCell<Vec<f64>>,
    evaluations: std::cell::Cell<usize>,
}

impl<P: Problem + ?Sized> Augmented<'_, P> {
    fn value(&self, z: &[f64]) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        let mut cons = self.cons.borrow_mut();
        let f = self.problem.evaluate(z, &mut cons);
        let mut penalty = 0.0;
        for (c, l) in cons.iter().zip(self.lambda) {
            let shifted = (l + self.mu * c).max(0.0);
            penalty += shifted * shifted - l * l;
        }
        f + penalty / (2.0 * self.mu)
    }
}

struct InnerOutcome {
    iterations: usize,
    /// Relative projected gradient norm at the returned point.
    stationarity: f64,
}

/// Projected L-BFGS on `fun` from `z` (updated in place).
fn lbfgs_inner<F>(fun: &F, z: &mut Vec<f64>, bounds: &Bounds<'_>, opts: &SolverOptions) -> Result<InnerOutcome>
where
    F: Fn(&[f64]) -> f64,
{
    let n = z.len();
    let mut work = z.clone();
    let mut fz = fun(z);
    let mut g = vec![0.0; n];
    fd_into(fun, &mut work, opts.fd_step, &mut g)?;
    let mut pg = g.clone();
    bounds.project_gradient(z, &mut pg);

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut stalls = 0;
    let mut iterations = 0;
    let mut stationarity = inf_norm(&pg);

    while iterations < opts.max_inner {
        if stationarity <= opts.opttol {
            break;
        }
        iterations += 1;

        // Two-loop recursion restricted to the free variables.
        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0 || g[i] == 0.0).collect();
        let mut d: Vec<f64> = pg.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(memory.len());
        for (s, y, rho) in memory.iter().rev() {
            let a = rho * masked_dot(s, &d, &free);
            for i in 0..n {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = memory.back() {
            let yy = masked_dot(y, y, &free);
            if yy > 0.0 {
                let gamma = masked_dot(s, y, &free) / yy;
                if gamma > 0.0 {
                    d.iter_mut().for_each(|v| *v *= gamma);
                }
            }
        }
        for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
            let b = rho * masked_dot(y, &d, &free);
            for i in 0..n {
                if free[i] {
                    d[i] += s[i] * (a - b);
                }
            }
        }
        let mut slope = dot(&d, &pg);
        if !(slope < 0.0) || !slope.is_finite() {
            memory.clear();
            d = pg.iter().map(|v| -v).collect();
            slope = dot(&d, &pg);
        }

        let mut t = if memory.is_empty() {
            (1.0 / inf_norm(&pg)).min(1.0)
        } else {
            1.0
        };
        let mut trial = z.clone();
        let mut f_trial = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = z[i] + t * d[i];
            }
            bounds.project(&mut trial);
            f_trial = fun(&trial);
            let predicted: f64 = (0..n).map(|i| g[i] * (trial[i] - z[i])).sum();
            if f_trial.is_finite() && f_trial <= fz + opts.armijo * predicted.min(t * slope) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if memory.is_empty() {
                break;
            }
            memory.clear();
            continue;
        }

        let mut g_new = vec![0.0; n];
        work.copy_from_slice(&trial);
        fd_into(fun, &mut work, opts.fd_step, &mut g_new)?;
        let s: Vec<f64> = trial.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if memory.len() == opts.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }

        let decrease = fz - f_trial;
        *z = trial;
        g = g_new;
        pg.copy_from_slice(&g);
        bounds.project_gradient(z, &mut pg);
        fz = f_trial;
        stationarity = inf_norm(&pg);

        if decrease <= 1e-15 * fz.abs().max(1.0) {
            stalls += 1;
            if stalls >= 5 {
                break;
            }
        } else {
            stalls = 0;
        }
        if fz < -1e20 {
            break;
        }
    }
    Ok(InnerOutcome {
        iterations,
        stationarity,
    })
}

fn masked_dot(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((x, y), _)| x * y)
        .sum()
}

struct Candidate {
    z: Vec<f64>,
    objective: f64,
    constraints: Vec<f64>,
    violation: f64,
    stationarity: f64,
}

impl Candidate {
    /// Feasible points beat infeasible ones; then lower objective, or lower violation.
    fn better_than(&self, other: &Candidate, feastol: f64) -> bool {
        let a = self.violation <= feastol;
        let b = other.violation <= feastol;
        match (a, b) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.objective < other.objective,
            (false, false) => self.violation < other.violation,
        }
    }
}

const DIVERGENCE_RADIUS: f64 = 1e8;

/// Minimizes `problem` starting from `guess`.
///
/// The result is deterministic for identical inputs. The returned point is
/// the best of the starting point and all outer iterates: the feasible one
/// with the lowest objective, or the least infeasible one.
pub fn minimize<P: Problem + ?Sized>(problem: &P, guess: &[f64], opts: &SolverOptions) -> Result<NlpResult> {
    opts.validate()?;
    let n = problem.dim();
    let m = problem.num_constraints();
    check_dim("initial guess", n, guess.len())?;
    if let Some(b) = problem.bounds() {
        check_dim("decision bounds", n, b.dim())?;
    }
    let bounds = match problem.bounds() {
        Some(b) => Bounds {
            lower: Some(b.lower()),
            upper: Some(b.upper()),
        },
        None => Bounds {
            lower: None,
            upper: None,
        },
    };

    let mut cons = vec![0.0; m];
    let f_guess = problem.evaluate(guess, &mut cons);
    if !f_guess.is_finite() || cons.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidStart(format!(
            "objective {f_guess}, constraints {cons:?}"
        )));
    }
    let mut best = Candidate {
        z: guess.to_vec(),
        objective: f_guess,
        violation: max_violation(&cons),
        constraints: cons.clone(),
        stationarity: f64::INFINITY,
    };

    let mut z = guess.to_vec();
    bounds.project(&mut z);
    let mut lambda = vec![0.0; m];
    let mut mu = opts.penalty_init;
    let mut iterations = Iterations::default();
    let mut trace = Vec::new();
    let mut last_merit = f64::INFINITY;
    let mut prev_violation = f64::INFINITY;
    let mut slow_rounds = 0;
    let mut prev_objective = f64::INFINITY;
    let mut unbounded = false;
    let guess_scale = inf_norm(guess).max(1.0);

    for outer in 0..opts.max_outer {
        iterations.outer = outer + 1;
        let aug = Augmented {
            problem,
            lambda: &lambda,
            mu,
            cons: std::cell::RefCell::new(vec![0.0; m]),
            evaluations: std::cell::Cell::new(0),
        };
        let inner = lbfgs_inner(&|v: &[f64]| aug.value(v), &mut z, &bounds, opts)?;
        iterations.inner += inner.iterations;
        iterations.evaluations += aug.evaluations.get();

        let f = problem.evaluate(&z, &mut cons);
        let violation = max_violation(&cons);
        // ∇L_A(z; λ, μ) = ∇f + Σ max(0, λ + μc) ∇c, i.e. the Lagrangian
        // gradient at the updated multipliers.
        let stationarity = inner.stationarity;
        for (l, c) in lambda.iter_mut().zip(&cons) {
            *l = (*l + mu * c).max(0.0);
        }
        let complementarity = lambda
            .iter()
            .zip(&cons)
            .fold(0.0_f64, |acc, (l, c)| acc.max(l.min(-c).abs()));

        let merit = f + opts.merit_weight * l1_violation(&cons);
        let accepted = merit <= last_merit;
        if accepted {
            last_merit = merit;
        }
        if opts.record_trace {
            trace.push(OuterRecord {
                outer: outer + 1,
                inner: inner.iterations,
                objective: f,
                violation,
                penalty: mu,
                merit,
                accepted,
            });
        }

        let candidate = Candidate {
            z: z.clone(),
            objective: f,
            constraints: cons.clone(),
            violation,
            stationarity,
        };
        if candidate.better_than(&best, opts.feastol) {
            best = candidate;
        }

        // Runaway iterates: the instance is treated as unbounded.
        if !f.is_finite() || f < -1e20 || inf_norm(&z) > DIVERGENCE_RADIUS * guess_scale {
            unbounded = true;
            break;
        }
        if violation <= opts.feastol && stationarity <= opts.opttol && complementarity <= opts.feastol.max(opts.opttol)
        {
            break;
        }
        // Without constraints another round only restarts the quasi-Newton
        // memory; stop once that no longer helps.
        if m == 0 && f >= prev_objective - 1e-12 * f.abs().max(1.0) {
            break;
        }
        prev_objective = f;

        if violation > opts.feastol {
            if violation > 0.9 * prev_violation {
                slow_rounds += 1;
            } else {
                slow_rounds = 0;
            }
            if violation > 0.25 * prev_violation.min(f64::MAX) || prev_violation.is_infinite() {
                mu = (mu * opts.penalty_growth).min(opts.penalty_max);
            }
            if mu >= opts.penalty_max && slow_rounds >= 3 {
                break;
            }
        } else {
            slow_rounds = 0;
        }
        prev_violation = violation;
    }

    let status = if unbounded {
        SolveStatus::BudgetExhausted
    } else if best.violation <= opts.feastol {
        if best.stationarity <= opts.opttol {
            SolveStatus::Optimal
        } else {
            SolveStatus::FeasibleSuboptimal
        }
    } else if slow_rounds > 0 {
        SolveStatus::Infeasible
    } else {
        SolveStatus::BudgetExhausted
    };

    Ok(NlpResult {
        objective: best.objective,
        max_violation: best.violation,
        stationarity: best.stationarity,
        z_star: best.z,
        constraints: best.constraints,
        multipliers: lambda,
        status,
        iterations,
        trace,
    })
}

struct Scaled<'a, P: ?Sized> {
    inner: &'a P,
    var: f64,
    obj: f64,
    con: f64,
    bounds: Option<BoxSet>,
}

impl<P: Problem + ?Sized> Scaled<'_, P> {
    fn unscale(&self, w: &[f64]) -> Vec<f64> {
        w.iter().map(|v| v * self.var).collect()
    }
}

impl<P: Problem + ?Sized> Problem for Scaled<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_constraints(&self) -> usize {
        self.inner.num_constraints()
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.inner.objective(&self.unscale(w)) / self.obj
    }

    fn constraints(&self, w: &[f64], out: &mut [f64]) {
        self.inner.constraints(&self.unscale(w), out);
        out.iter_mut().for_each(|c| *c /= self.con);
    }

    fn bounds(&self) -> Option<&BoxSet> {
        self.bounds.as_ref()
    }

    fn evaluate(&self, w: &[f64], cons: &mut [f64]) -> f64 {
        let f = self.inner.evaluate(&self.unscale(w), cons);
        cons.iter_mut().for_each(|c| *c /= self.con);
        f / self.obj
    }
}

/// Scale factors for [`minimize_scaled`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub variables: f64,
    pub objective: f64,
    pub constraints: f64,
}

impl Default for Scaling {
    fn default() -> Self {
        Self {
            variables: 1.0,
            objective: 1.0,
            constraints: 1.0,
        }
    }
}

/// [`minimize`] on the equivalent problem `f(s·w)/a`, `c(s·w)/b ≤ 0`.
///
/// Tolerances apply to the scaled problem; the result is mapped back to the
/// original variables and values. Useful when the problem data shrink
/// toward zero, as they do near an equilibrium.
pub fn minimize_scaled<P: Problem + ?Sized>(
    problem: &P,
    guess: &[f64],
    opts: &SolverOptions,
    scaling: Scaling,
) -> Result<NlpResult> {
    let Scaling {
        variables: s,
        objective: a,
        constraints: b,
    } = scaling;
    for (name, v) in [("variable", s), ("objective", a), ("constraint", b)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::ContractViolation(format!(
                "{name} scale must be positive, got {v}"
            )));
        }
    }
    let bounds = match problem.bounds() {
        Some(bx) => Some(BoxSet::new(
            bx.lower().iter().map(|v| v / s).collect(),
            bx.upper().iter().map(|v| v / s).collect(),
        )?),
        None => None,
    };
    let scaled = Scaled {
        inner: problem,
        var: s,
        obj: a,
        con: b,
        bounds,
    };
    let w0: Vec<f64> = guess.iter().map(|v| v / s).collect();
    let mut r = minimize(&scaled, &w0, opts)?;
    r.z_star = scaled.unscale(&r.z_star);
    r.objective *= a;
    r.constraints.iter_mut().for_each(|c| *c *= b);
    r.max_violation *= b;
    r.stationarity *= a / s;
    r.multipliers.iter_mut().for_each(|l| *l *= a / b);
    for rec in &mut r.trace {
        rec.objective *= a;
        rec.violation *= b;
        rec.merit = rec.objective + opts.merit_weight * rec.violation;
    }
    Ok(r)
}

/// Least-squares feasibility phase: minimizes `Σ max(0, cᵢ(s·w)/b)²` from
/// `guess` (objective ignored) and returns the point reached.
///
/// Gives [`minimize_scaled`] a start away from saddle points of the
/// objective where the constraints are flat.
pub fn feasibility_phase<P: Problem + ?Sized>(
    problem: &P,
    guess: &[f64],
    opts: &SolverOptions,
    scaling: Scaling,
) -> Result<Vec<f64>> {
    let m = problem.num_constraints();
    let b = scaling.constraints;
    let phase = FeasibilityProblem {
        inner: problem,
        scale: b,
        cons: std::cell::RefCell::new(vec![0.0; m]),
    };
    let r = minimize_scaled(
        &phase,
        guess,
        opts,
        Scaling {
            constraints: 1.0,
            objective: 1.0,
            ..scaling
        },
    )?;
    Ok(r.z_star)
}

struct FeasibilityProblem<'a, P: ?Sized> {
    inner: &'a P,
    scale: f64,
    cons: std::cell::RefCell<Vec<f64>>,
}

impl<P: Problem + ?Sized> Problem for FeasibilityProblem<'_, P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_constraints(&self) -> usize {
        0
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let mut c = self.cons.borrow_mut();
        self.inner.constraints(z, &mut c);
        c.iter().map(|v| (v / self.scale).max(0.0).powi(2)).sum()
    }

    fn constraints(&self, _z: &[f64], _out: &mut [f64]) {}

    fn bounds(&self) -> Option<&BoxSet> {
        self.inner.bounds()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scaled_solve_matches_plain() {
        let p = FnProblem::unconstrained(2, |z| (z[0] - 1.0).powi(2) + z[1] * z[1])
            .with_constraints(1, |z, c| c[0] = 1.0 - z[0] - z[1]);
        let opts = SolverOptions::default();
        let a = minimize(&p, &[0.0, 0.0], &opts).unwrap();
        let b = minimize_scaled(
            &p,
            &[0.0, 0.0],
            &opts,
            Scaling {
                variables: 0.5,
                objective: 4.0,
                constraints: 0.25,
            },
        )
        .unwrap();
        assert!(b.status.is_feasible());
        assert_abs_diff_eq!(a.z_star[0], b.z_star[0], epsilon = 1e-4);
        assert_abs_diff_eq!(a.objective, b.objective, epsilon = 1e-6);
        assert!(minimize_scaled(
            &p,
            &[0.0, 0.0],
            &opts,
            Scaling {
                variables: 0.0,
                ..Scaling::default()
            }
        )
        .is_err());
    }

    #[test]
    fn tiny_problem_needs_scaling() {
        // Optimum near 1e-8: absolute tolerances see the start as stationary.
        let t = 1e-8;
        let p =
            FnProblem::unconstrained(1, move |z| (z[0] - t).powi(2)).with_constraints(1, move |z, c| c[0] = t - z[0]);
        let r = minimize_scaled(
            &p,
            &[0.0],
            &SolverOptions::default(),
            Scaling {
                variables: t,
                objective: t * t,
                constraints: t,
            },
        )
        .unwrap();
        assert!(r.status.is_feasible());
        assert_abs_diff_eq!(r.z_star[0], t, epsilon = 1e-12);
    }

    #[test]
    fn fd_gradient_of_square_norm() {
        let g = gradient_fd(|z| z.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-6).unwrap();
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[1], 4.0, epsilon = 1e-6);
    }

    #[test]
    fn fd_gradient_of_affine_is_exact() {
        let g = gradient_fd(|z| 3.0 * z[0] - 0.5 * z[1] + 7.0, &[0.25, -1.5], 1e-6).unwrap();
        assert_abs_diff_eq!(g[0], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], -0.5, epsilon = 1e-9);
    }

    #[test]
    fn fd_reports_non_finite_component() {
        let err = gradient_fd(|z| if z[1] > 1.0 { f64::NAN } else { z[0] }, &[0.0, 1.0], 1e-6).unwrap_err();
        assert_eq!(err, Error::NonFiniteSample { component: 1 });
    }

    #[test]
    fn unconstrained_quadratic() {
        let c = [1.5, -2.0, 0.25];
        let p = FnProblem::unconstrained(3, move |z| z.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum());
        let r = minimize(&p, &[0.0; 3], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        for (a, b) in r.z_star.iter().zip(&c) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn halfplane_constrained_quadratic() {
        // min z₁² + z₂² s.t. 1 − z₁ − z₂ ≤ 0; KKT gives (0.5, 0.5), value 0.5.
        let p = FnProblem::unconstrained(2, |z| z[0] * z[0] + z[1] * z[1])
            .with_constraints(1, |z, c| c[0] = 1.0 - z[0] - z[1]);
        let r = minimize(&p, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(r.z_star[0], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(r.z_star[1], 0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(r.objective, 0.5, epsilon = 1e-5);
        assert!(r.max_violation <= 1e-6);
        assert_abs_diff_eq!(r.multipliers[0], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn bounds_are_hard() {
        let p = FnProblem::unconstrained(2, |z| (z[0] - 3.0).powi(2) + (z[1] + 3.0).powi(2))
            .with_bounds(BoxSet::symmetric(2, 1.0).unwrap());
        let r = minimize(&p, &[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.z_star, vec![1.0, -1.0]);
        assert_eq!(r.status, SolveStatus::Optimal);
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // z² ≤ −1 has no solution.
        let p = FnProblem::unconstrained(1, |z| z[0] * z[0]).with_constraints(1, |z, c| c[0] = z[0] * z[0] + 1.0);
        let r = minimize(&p, &[0.3], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.max_violation >= 1.0 - 1e-9);
    }

    #[test]
    fn unbounded_problem_is_not_optimal() {
        let p = FnProblem::unconstrained(1, |z| -z[0]);
        let r = minimize(&p, &[0.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::BudgetExhausted);
    }

    #[test]
    fn invalid_start() {
        let p = FnProblem::unconstrained(1, |z| z[0].ln());
        assert!(matches!(
            minimize(&p, &[-1.0], &SolverOptions::default()),
            Err(Error::InvalidStart(_))
        ));
        assert!(matches!(
            minimize(&p, &[1.0, 2.0], &SolverOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn options_validation() {
        let bad = SolverOptions {
            penalty_growth: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverOptions {
            feastol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SolverOptions::default().validate().is_ok());
    }

    #[test]
    fn merit_is_monotone_over_accepted_iterates() {
        let p =
            FnProblem::unconstrained(2, |z| (z[0] - 2.0).powi(2) + (z[1] - 1.0).powi(4)).with_constraints(2, |z, c| {
                c[0] = z[0] * z[0] + z[1] * z[1] - 1.0;
                c[1] = -z[1];
            });
        let opts = SolverOptions {
            record_trace: true,
            ..Default::default()
        };
        let r = minimize(&p, &[0.0, 0.0], &opts).unwrap();
        assert!(r.status.is_feasible());
        let accepted: Vec<f64> = r.trace.iter().filter(|t| t.accepted).map(|t| t.merit).collect();
        assert!(!accepted.is_empty());
        assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn deterministic() {
        let p = FnProblem::unconstrained(3, |z| {
            (z[0] - 1.0).powi(2) + 10.0 * (z[1] - z[0] * z[0]).powi(2) + z[2].abs()
        })
        .with_constraints(1, |z, c| c[0] = z[0] + z[1] - 1.5);
        let opts = SolverOptions {
            record_trace: true,
            ..Default::default()
        };
        let a = minimize(&p, &[-1.0, 2.0, 0.3], &opts).unwrap();
        let b = minimize(&p, &[-1.0, 2.0, 0.3], &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feasible_start_is_never_worsened() {
        let p = FnProblem::unconstrained(2, |z| (z[0] * z[1] - 1.0).powi(2) + 0.1 * z[0].abs())
            .with_constraints(1, |z, c| c[0] = z[0] - 0.5);
        let guess = [0.4, 2.5];
        let opts = SolverOptions::default();
        let f0 = p.objective(&guess);
        let r = minimize(&p, &guess, &opts).unwrap();
        assert!(r.objective <= f0 + opts.opttol);
        assert!(r.max_violation <= opts.feastol);
    }
}
