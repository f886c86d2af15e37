//! Closed-loop receding-horizon engines.
//!
//! [`flexible_step_run`] solves the flexible-step problem at the current
//! state, finds an index `ℓ_decr` where the predicted Lyapunov value drops by
//! at least `α`, implements the first `ℓ_decr` inputs and starts over from the
//! reached state. [`standard_run`] is the terminal-cost baseline that always
//! implements a fixed number of inputs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lyapunov::{select_index, DescentPolicy, DESCENT_TOL};
use crate::model::SystemModel;
use crate::nlp::{feasibility_phase, minimize, minimize_scaled, FnProblem, NlpResult, Scaling, SolverOptions};
use crate::ocp::{build_flexstep_nlp, build_standard_nlp, shift_warm_start, OcpSpec, StageCost, WarmStartPad};

/// How `u*⁻` is refreshed after each instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowUpdate {
    /// `u*⁻ := u*[ℓ_decr .. ℓ_decr + q − 1]`.
    #[default]
    ShiftOptimal,
    /// Any window `ū` at the reached state with `V(x^ℓ, ū) − V₀ ≤ −α₀`,
    /// found by minimizing `V(x^ℓ, ·)` from the shifted window and random starts.
    SearchAlternative { restarts: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexStepConfig {
    pub policy: DescentPolicy,
    /// Initial `u*⁻` (`q · p` entries); `None` means zeros.
    pub u_prev_init: Option<Vec<f64>>,
    pub u_prev_update: WindowUpdate,
    /// Solver start for the first instance (`N · p` entries); `None` means zeros.
    pub initial_guess: Option<Vec<f64>>,
    pub warm_start_pad: WarmStartPad,
    /// Start every instance from `initial_guess` instead of the shifted optimum.
    pub cold_start: bool,
    /// Closed-loop budget in time steps.
    pub max_steps: usize,
    /// Stop once `‖x(k)‖∞ ≤ stop_radius`.
    pub stop_radius: f64,
    /// Slack on the descent inequality when choosing `ℓ_decr`.
    pub descent_tol: f64,
    /// Extra seeded random starts (each preceded by a feasibility phase)
    /// tried on every instance besides the warm start.
    pub multistart: usize,
    /// Random starts tried when every other start ends infeasible.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FlexStepConfig {
    fn default() -> Self {
        Self {
            policy: DescentPolicy::GreatestDescent,
            u_prev_init: None,
            u_prev_update: WindowUpdate::ShiftOptimal,
            initial_guess: None,
            warm_start_pad: WarmStartPad::Zeros,
            cold_start: false,
            max_steps: 300,
            stop_radius: 1e-3,
            descent_tol: DESCENT_TOL,
            multistart: 0,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum Scheme {
    FlexStep,
    Standard { gamma: f64 },
}

/// One optimization instance of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: usize,
    pub k_start: usize,
    pub x: Vec<f64>,
    pub u_prev: Vec<f64>,
    /// Optimal input sequence, flattened.
    pub u_star: Vec<f64>,
    /// `[V₀, V₁, …, Vₘ]`; `V₀ = V(x, u*⁻)`.
    pub v_pred: Vec<f64>,
    pub alpha0: f64,
    /// Implemented steps (`ℓ_decr` for flexible-step runs).
    pub l_decr: usize,
    /// adc residual at the optimum; `None` for standard instances.
    pub adc_residual: Option<f64>,
    pub solve: NlpResult,
}

/// One implemented closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActualStep {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Lyapunov value attached to `x(k)`.
    pub v: f64,
    pub instance_id: usize,
}

/// Full record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct MpcTrace {
    pub scheme: Scheme,
    pub k0: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub stage_cost: StageCost,
    pub instances: Vec<InstanceRecord>,
    pub actual: Vec<ActualStep>,
    /// `x(K)` after the last implemented step.
    pub final_state: Vec<f64>,
    /// `u*⁻` after the last update.
    pub final_window: Vec<f64>,
    /// `V` at the final state and window.
    pub final_v: f64,
}

impl MpcTrace {
    fn empty(scheme: Scheme, spec: &OcpSpec, x0: &[f64], window: &[f64], k0: usize) -> Self {
        Self {
            scheme,
            k0,
            state_dim: spec.model.state_dim(),
            input_dim: spec.model.input_dim(),
            stage_cost: spec.stage_cost.clone(),
            instances: Vec::new(),
            actual: Vec::new(),
            final_state: x0.to_vec(),
            final_window: window.to_vec(),
            final_v: spec.gdclf.v(x0, window),
        }
    }

    /// Index of the last time step, `K`.
    pub fn final_k(&self) -> usize {
        self.k0 + self.actual.len()
    }

    /// `x(k₀) … x(K)`.
    pub fn states(&self) -> Vec<Vec<f64>> {
        let mut xs: Vec<Vec<f64>> = self.actual.iter().map(|a| a.x.clone()).collect();
        xs.push(self.final_state.clone());
        xs
    }

    pub fn implemented_steps(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.l_decr).collect()
    }

    /// First `k` with `‖x(k)‖∞ ≤ radius`.
    pub fn convergence_step(&self, radius: f64) -> Option<usize> {
        self.states()
            .iter()
            .position(|x| inf_norm(x) <= radius)
            .map(|i| self.k0 + i)
    }
}

/// A run that stopped early, together with everything recorded so far.
#[derive(Debug)]
pub struct RunAbort {
    pub error: Error,
    pub trace: Box<MpcTrace>,
}

impl fmt::Display for RunAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run aborted at k={} after {} instances: {}",
            self.trace.final_k(),
            self.trace.instances.len(),
            self.error
        )
    }
}

impl std::error::Error for RunAbort {}

fn abort(error: Error, trace: MpcTrace) -> RunAbort {
    RunAbort {
        error,
        trace: Box::new(trace),
    }
}

pub fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn padded_window(z: &[f64], from: usize, len: usize) -> Vec<f64> {
    (from..from + len).map(|i| z.get(i).copied().unwrap_or(0.0)).collect()
}

/// Predicted `[V₀ … Vₘ]` along `z` under the exact model.
fn predicted_lyapunov(spec: &OcpSpec, x: &[f64], u_prev: &[f64], z: &[f64]) -> Vec<f64> {
    let (n, p) = (spec.model.state_dim(), spec.model.input_dim());
    let (m, q) = (spec.gdclf.order(), spec.gdclf.window());
    let states = spec.model.rollout_flat(x, z, m);
    let mut v = Vec::with_capacity(m + 1);
    v.push(spec.gdclf.v(x, u_prev));
    for l in 1..=m {
        v.push(
            spec.gdclf
                .v(&states[l * n..(l + 1) * n], &padded_window(z, l * p, q * p)),
        );
    }
    v
}

/// Runs the flexible-step scheme from `x0` until `‖x‖∞ ≤ stop_radius` or
/// `max_steps` steps have been implemented.
///
/// On failure the partial trace is returned inside [`RunAbort`].
pub fn flexible_step_run(
    spec: &OcpSpec,
    x0: &[f64],
    cfg: &FlexStepConfig,
    opts: &SolverOptions,
) -> std::result::Result<MpcTrace, RunAbort> {
    let (p, q) = (spec.model.input_dim(), spec.gdclf.window());
    let u_prev = cfg.u_prev_init.clone().unwrap_or_else(|| vec![0.0; q * p]);
    let mut trace = MpcTrace::empty(Scheme::FlexStep, spec, x0, &u_prev, 0);
    if let Err(e) = check_dim("initial state", spec.model.state_dim(), x0.len())
        .and_then(|_| check_dim("initial window", q * p, u_prev.len()))
        .and_then(|_| opts.validate())
    {
        return Err(abort(e, trace));
    }
    let solve_spec = spec.with_model(spec.model.smoothed(opts.smooth_abs_delta));
    let n_inputs = spec.flex_inputs();
    let mut guess = match &cfg.initial_guess {
        Some(g) if g.len() == n_inputs * p => g.clone(),
        Some(g) => {
            let e = Error::DimensionMismatch {
                what: "initial guess",
                expected: n_inputs * p,
                got: g.len(),
            };
            return Err(abort(e, trace));
        }
        None => vec![0.0; n_inputs * p],
    };

    let mut x = x0.to_vec();
    let mut u_prev = u_prev;
    let mut k = 0;
    while k < cfg.max_steps && inf_norm(&x) > cfg.stop_radius {
        let instance = match build_flexstep_nlp(&solve_spec, &x, &u_prev) {
            Ok(i) => i,
            Err(e) => return Err(abort(e, trace)),
        };
        let (v0, alpha0) = instance.frozen_lyapunov().expect("flexible-step instance");
        // Near the origin the inputs shrink like V₀^¼ (x₃ is reached through
        // products of inputs), the cost like √V₀ and the adc like V₀.
        let s = if v0 > 0.0 { v0.min(1.0) } else { 1.0 };
        let scaling = Scaling {
            variables: s.powf(0.25),
            objective: s.sqrt(),
            constraints: s,
        };
        // Back the adc off by the solver tolerance so accepted points satisfy
        // it exactly and a descent index is guaranteed.
        let instance = instance.with_adc_margin(opts.feastol * scaling.constraints);
        let solve_with = |g: &[f64], o: &SolverOptions| minimize_scaled(&instance, g, o, scaling);
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (trace.instances.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        // A random sequence at the input scale, pushed toward feasibility.
        let mut random_start = || {
            let random: Vec<f64> = (0..guess.len())
                .map(|_| scaling.variables * rng.gen_range(-1.0..1.0))
                .collect();
            feasibility_phase(&instance, &random, opts, scaling).unwrap_or(random)
        };
        // Keeps the cheapest feasible result.
        let keep_better = |best: &mut Option<NlpResult>, r: NlpResult| {
            let better = match best {
                Some(b) => r.status.is_feasible() && (!b.status.is_feasible() || r.objective < b.objective),
                None => true,
            };
            if better {
                *best = Some(r);
            }
        };

        let mut best = None;
        match solve_with(&guess, opts) {
            Ok(r) => keep_better(&mut best, r),
            Err(e) => return Err(abort(e, trace)),
        }
        for _ in 0..cfg.multistart {
            if let Ok(r) = solve_with(&random_start(), opts) {
                keep_better(&mut best, r);
            }
        }
        if !best.as_ref().is_some_and(|r| r.status.is_feasible()) {
            // The zero sequence, then more random starts.
            for attempt in 0..=cfg.restarts {
                let start = if attempt == 0 {
                    vec![0.0; guess.len()]
                } else {
                    random_start()
                };
                if let Ok(r) = solve_with(&start, opts) {
                    keep_better(&mut best, r);
                }
            }
        }
        let mut solve = best.expect("at least one solve");
        if !solve.status.is_feasible() {
            let e = Error::SolverFailed {
                k,
                status: solve.status.to_string(),
            };
            return Err(abort(e, trace));
        }

        let mut v_pred = predicted_lyapunov(spec, &x, &u_prev, &solve.z_star);
        let mut report = select_index(v0, alpha0, &v_pred[1..], cfg.policy, cfg.descent_tol);
        if report.is_err() {
            // Retry once with tighter tolerances to separate numerical slack
            // from a genuine failure.
            let tight = opts.tightened(10.0);
            if let Ok(r) = solve_with(&solve.z_star, &tight) {
                let v = predicted_lyapunov(spec, &x, &u_prev, &r.z_star);
                let again = select_index(v0, alpha0, &v[1..], cfg.policy, cfg.descent_tol);
                if again.is_ok() {
                    solve = r;
                    v_pred = v;
                    report = again;
                }
            }
        }
        let report = match report {
            Ok(r) => r,
            Err(e) => return Err(abort(e, trace)),
        };
        let l = report.chosen;
        let z = solve.z_star.clone();
        let adc = instance.adc_value(&z);
        let id = trace.instances.len();

        for j in 0..l {
            let u = z[j * p..(j + 1) * p].to_vec();
            let v = if j == 0 { v0 } else { v_pred[j] };
            let next = spec.model.step(&x, &u).expect("checked dimensions");
            trace.actual.push(ActualStep {
                k,
                x: std::mem::replace(&mut x, next),
                u,
                v,
                instance_id: id,
            });
            k += 1;
        }

        let shifted = padded_window(&z, l * p, q * p);
        let new_window = match cfg.u_prev_update {
            WindowUpdate::ShiftOptimal => shifted,
            WindowUpdate::SearchAlternative { restarts, seed } => search_window(
                spec,
                &x,
                shifted,
                v0,
                alpha0,
                restarts,
                seed.wrapping_add(id as u64),
                opts,
            ),
        };

        trace.instances.push(InstanceRecord {
            id,
            k_start: k - l,
            x: instance.state().to_vec(),
            u_prev: std::mem::replace(&mut u_prev, new_window),
            u_star: z.clone(),
            v_pred,
            alpha0,
            l_decr: l,
            adc_residual: adc,
            solve,
        });
        trace.final_state = x.clone();
        trace.final_window = u_prev.clone();
        trace.final_v = spec.gdclf.v(&x, &u_prev);
        if !cfg.cold_start {
            guess = shift_warm_start(&z, p, l, cfg.warm_start_pad).expect("1 ≤ ℓ ≤ N");
        }
    }
    Ok(trace)
}

/// Alternative `u*⁻` assignment: the lowest-`V` window at `x` satisfying the
/// descent inequality. Falls back to `shifted`, which always satisfies it.
#[allow(clippy::too_many_arguments)]
fn search_window(
    spec: &OcpSpec,
    x: &[f64],
    shifted: Vec<f64>,
    v0: f64,
    alpha0: f64,
    restarts: usize,
    seed: u64,
    opts: &SolverOptions,
) -> Vec<f64> {
    let len = shifted.len();
    if len == 0 {
        return shifted;
    }
    let gdclf = spec.gdclf.clone();
    let state = x.to_vec();
    let mut problem = FnProblem::unconstrained(len, move |w| gdclf.v(&state, w));
    if !spec.input_set.is_unbounded() {
        let q = len / spec.model.input_dim();
        let bounds = crate::model::BoxSet::new(spec.input_set.lower().repeat(q), spec.input_set.upper().repeat(q))
            .expect("valid input box");
        problem = problem.with_bounds(bounds);
    }
    let admissible = |w: &[f64]| spec.gdclf.v(x, w) - v0 <= -alpha0;
    let mut best = shifted.clone();
    let mut best_v = spec.gdclf.v(x, &shifted);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = inf_norm(&shifted).max(1.0);
    for attempt in 0..=restarts {
        let start: Vec<f64> = if attempt == 0 {
            shifted.clone()
        } else {
            (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
        };
        if let Ok(r) = minimize(&problem, &start, opts) {
            let v = spec.gdclf.v(x, &r.z_star);
            let inside = spec.input_set.is_unbounded()
                || r.z_star
                    .chunks(spec.model.input_dim())
                    .all(|u| spec.input_set.contains(u));
            if inside && v < best_v && admissible(&r.z_star) {
                best_v = v;
                best = r.z_star;
            }
        }
    }
    best
}

/// Standard terminal-cost MPC: solve, implement `steps_per_instance` inputs, repeat.
pub fn standard_run(
    spec: &OcpSpec,
    x0: &[f64],
    gamma: f64,
    steps_per_instance: usize,
    max_steps: usize,
    initial_guess: Option<&[f64]>,
    opts: &SolverOptions,
) -> std::result::Result<MpcTrace, RunAbort> {
    let (p, q) = (spec.model.input_dim(), spec.gdclf.window());
    let mut trace = MpcTrace::empty(Scheme::Standard { gamma }, spec, x0, &vec![0.0; q * p], 0);
    let np = spec.horizon;
    if steps_per_instance == 0 || steps_per_instance > np {
        let e = Error::ContractViolation(format!(
            "steps per instance must lie in 1..={np}, got {steps_per_instance}"
        ));
        return Err(abort(e, trace));
    }
    if let Err(e) = check_dim("initial state", spec.model.state_dim(), x0.len()).and_then(|_| opts.validate()) {
        return Err(abort(e, trace));
    }
    let solve_spec = spec.with_model(spec.model.smoothed(opts.smooth_abs_delta));
    let mut guess = match initial_guess {
        Some(g) if g.len() == np * p => g.to_vec(),
        Some(g) => {
            let e = Error::DimensionMismatch {
                what: "initial guess",
                expected: np * p,
                got: g.len(),
            };
            return Err(abort(e, trace));
        }
        None => vec![0.0; np * p],
    };

    let mut x = x0.to_vec();
    let mut k = 0;
    while k < max_steps {
        let instance = match build_standard_nlp(&solve_spec, &x, gamma) {
            Ok(i) => i,
            Err(e) => return Err(abort(e, trace)),
        };
        let solve = match minimize(&instance, &guess, opts) {
            Ok(r) if r.status.is_feasible() => r,
            Ok(r) => {
                let e = Error::SolverFailed {
                    k,
                    status: r.status.to_string(),
                };
                return Err(abort(e, trace));
            }
            Err(e) => return Err(abort(e, trace)),
        };
        let z = solve.z_star.clone();
        let window = |from: usize| padded_window(&z, from * p, q * p);
        let v_pred = predicted_lyapunov(spec, &x, &window(0), &z);
        let id = trace.instances.len();
        let x_start = x.clone();
        for j in 0..steps_per_instance {
            let u = z[j * p..(j + 1) * p].to_vec();
            let v = spec.gdclf.v(&x, &window(j));
            let next = spec.model.step(&x, &u).expect("checked dimensions");
            trace.actual.push(ActualStep {
                k,
                x: std::mem::replace(&mut x, next),
                u,
                v,
                instance_id: id,
            });
            k += 1;
        }
        trace.instances.push(InstanceRecord {
            id,
            k_start: k - steps_per_instance,
            x: x_start,
            u_prev: Vec::new(),
            u_star: z.clone(),
            alpha0: 0.0,
            v_pred,
            l_decr: steps_per_instance,
            adc_residual: None,
            solve,
        });
        trace.final_state = x.clone();
        trace.final_window = window(steps_per_instance);
        trace.final_v = spec.gdclf.v(&x, &trace.final_window);
        guess = shift_warm_start(&z, p, steps_per_instance, WarmStartPad::Zeros).expect("valid shift");
    }
    Ok(trace)
}

/// `Σ_{j<k} f0(x(j), u(j))` over the implemented steps.
pub fn total_cost(trace: &MpcTrace, k: usize) -> Result<f64> {
    if k > trace.actual.len() {
        return Err(Error::ContractViolation(format!(
            "k={k} exceeds the {} implemented steps",
            trace.actual.len()
        )));
    }
    Ok(trace.actual[..k]
        .iter()
        .map(|a| trace.stage_cost.eval(&a.x, &a.u))
        .sum())
}

/// Running total cost for `k = 0 … K`.
pub fn total_cost_series(trace: &MpcTrace) -> Vec<f64> {
    let mut series = Vec::with_capacity(trace.actual.len() + 1);
    let mut acc = 0.0;
    series.push(acc);
    for a in &trace.actual {
        acc += trace.stage_cost.eval(&a.x, &a.u);
        series.push(acc);
    }
    series
}

/// `V(ω^{kₙ})` at every optimization instance.
pub fn lyapunov_subsequence(trace: &MpcTrace) -> Vec<f64> {
    trace.instances.iter().map(|i| i.v_pred[0]).collect()
}

/// Checks `V(ω^{kₙ₊₁}) − V(ω^{kₙ}) ≤ −α(ω^{kₙ}) + tol` and strict decrease
/// along the instance subsequence; the last instance is compared with the
/// final state. Returns the first offending instance id.
pub fn check_subsequence_decrease(trace: &MpcTrace, tol: f64) -> std::result::Result<(), usize> {
    let mut next_values: Vec<f64> = trace.instances.iter().skip(1).map(|i| i.v_pred[0]).collect();
    if !trace.instances.is_empty() {
        next_values.push(trace.final_v);
    }
    for (inst, next) in trace.instances.iter().zip(next_values) {
        let v = inst.v_pred[0];
        if !(next < v || v == 0.0) || next - v > -inst.alpha0 + tol {
            return Err(inst.id);
        }
    }
    Ok(())
}

/// One entry of the augmented closed-loop variable `y(k) = (x(kₙ), u*⁻(kₙ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedEntry {
    pub k: usize,
    /// Instance whose start `kₙ` this entry holds; for the terminal entry,
    /// the index the next instance would get.
    pub instance: usize,
    pub x: Vec<f64>,
    pub window: Vec<f64>,
}

/// Expands the instances into the piecewise-constant `y(k)` for
/// `k = k₀ … K`. The terminal entry `y(K)` holds the final state and window,
/// where the next instance would start.
pub fn augmented_log(trace: &MpcTrace) -> Vec<AugmentedEntry> {
    let mut log = Vec::with_capacity(trace.actual.len() + 1);
    for inst in &trace.instances {
        for j in 0..inst.l_decr {
            log.push(AugmentedEntry {
                k: inst.k_start + j,
                instance: inst.id,
                x: inst.x.clone(),
                window: inst.u_prev.clone(),
            });
        }
    }
    log.push(AugmentedEntry {
        k: trace.final_k(),
        instance: trace.instances.len(),
        x: trace.final_state.clone(),
        window: trace.final_window.clone(),
    });
    log
}

/// Re-simulates the recorded inputs from `x(k₀)`.
pub fn replay_states(model: &SystemModel, trace: &MpcTrace) -> Result<Vec<Vec<f64>>> {
    let Some(first) = trace.actual.first() else {
        return Ok(vec![trace.final_state.clone()]);
    };
    let inputs: Vec<Vec<f64>> = trace.actual.iter().map(|a| a.u.clone()).collect();
    model.rollout(&first.x, &inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{case_study_weights, GdclfSpec};
    use crate::model::brockett_variant;
    use crate::nlp::SolveStatus;
    use crate::ocp::TerminalCost;

    fn case_study() -> OcpSpec {
        OcpSpec::new(
            brockett_variant(),
            10,
            StageCost::Quadratic {
                state_weight: 1.0,
                input_weight: 5.0,
            },
            TerminalCost::Zero,
            GdclfSpec::squared_norm(case_study_weights(), 1e-5).unwrap(),
        )
        .unwrap()
    }

    fn dummy_solve() -> NlpResult {
        NlpResult {
            z_star: vec![],
            objective: 0.0,
            constraints: vec![],
            max_violation: 0.0,
            stationarity: 0.0,
            multipliers: vec![],
            status: SolveStatus::Optimal,
            iterations: Default::default(),
            trace: vec![],
        }
    }

    fn instance(id: usize, k_start: usize, l: usize, v0: f64) -> InstanceRecord {
        InstanceRecord {
            id,
            k_start,
            x: vec![k_start as f64],
            u_prev: vec![10.0 + k_start as f64],
            u_star: vec![],
            v_pred: vec![v0],
            alpha0: 0.0,
            l_decr: l,
            adc_residual: None,
            solve: dummy_solve(),
        }
    }

    fn hand_trace(instances: Vec<InstanceRecord>, final_k: usize, final_v: f64) -> MpcTrace {
        let actual = (0..final_k)
            .map(|k| ActualStep {
                k,
                x: vec![k as f64],
                u: vec![0.0],
                v: 0.0,
                instance_id: 0,
            })
            .collect();
        MpcTrace {
            scheme: Scheme::FlexStep,
            k0: 0,
            state_dim: 1,
            input_dim: 1,
            stage_cost: StageCost::Quadratic {
                state_weight: 1.0,
                input_weight: 5.0,
            },
            instances,
            actual,
            final_state: vec![final_k as f64],
            final_window: vec![10.0 + final_k as f64],
            final_v,
        }
    }

    #[test]
    fn augmented_log_matches_worked_pattern() {
        // Instances at k = 0, 2, 3 implementing 2, 1, 4 steps; the next one starts at 7.
        let trace = hand_trace(
            vec![instance(0, 0, 2, 4.0), instance(1, 2, 1, 3.0), instance(2, 3, 4, 2.0)],
            7,
            1.0,
        );
        let y = augmented_log(&trace);
        let starts: Vec<f64> = y.iter().map(|e| e.x[0]).collect();
        assert_eq!(starts, vec![0.0, 0.0, 2.0, 3.0, 3.0, 3.0, 3.0, 7.0]);
        let windows: Vec<f64> = y.iter().map(|e| e.window[0]).collect();
        assert_eq!(windows, vec![10.0, 10.0, 12.0, 13.0, 13.0, 13.0, 13.0, 17.0]);
        assert_eq!(y.len(), trace.actual.len() + 1);
        assert_eq!(lyapunov_subsequence(&trace), vec![4.0, 3.0, 2.0]);
        assert!(check_subsequence_decrease(&trace, 0.0).is_ok());
    }

    #[test]
    fn single_instance_log() {
        let trace = hand_trace(vec![instance(0, 0, 1, 1.0)], 1, 0.5);
        assert_eq!(augmented_log(&trace).len(), 2);
        assert_eq!(lyapunov_subsequence(&trace), vec![1.0]);
    }

    #[test]
    fn two_instance_hand_subsequence() {
        let trace = hand_trace(vec![instance(0, 0, 2, 1.0), instance(1, 2, 1, 0.9216)], 3, 0.5);
        let v = lyapunov_subsequence(&trace);
        assert!(v[1] < v[0]);
        assert!(check_subsequence_decrease(&trace, 0.0).is_ok());
        let bad = hand_trace(vec![instance(0, 0, 2, 1.0), instance(1, 2, 1, 1.2)], 3, 0.5);
        assert_eq!(check_subsequence_decrease(&bad, 0.0), Err(0));
    }

    #[test]
    fn total_cost_by_hand() {
        let mut trace = hand_trace(vec![], 0, 0.0);
        trace.state_dim = 4;
        trace.input_dim = 2;
        trace.actual.push(ActualStep {
            k: 0,
            x: vec![1.0, 2.0, 3.0, 5.0],
            u: vec![0.5, -2.0],
            v: 39.0,
            instance_id: 0,
        });
        assert_eq!(total_cost(&trace, 0).unwrap(), 0.0);
        assert_eq!(total_cost(&trace, 1).unwrap(), 39.0 + 5.0 * (0.25 + 4.0));
        assert!(total_cost(&trace, 2).is_err());
        assert_eq!(total_cost_series(&trace), vec![0.0, 39.0 + 5.0 * 4.25]);
    }

    #[test]
    fn origin_terminates_immediately() {
        let trace = flexible_step_run(
            &case_study(),
            &[0.0; 4],
            &FlexStepConfig::default(),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(trace.instances.is_empty());
        assert!(trace.actual.is_empty());
        assert_eq!(trace.final_k(), 0);
        assert_eq!(trace.final_state, vec![0.0; 4]);
    }

    #[test]
    fn bad_initial_guess_aborts() {
        let cfg = FlexStepConfig {
            initial_guess: Some(vec![1.0; 3]),
            ..Default::default()
        };
        let err = flexible_step_run(&case_study(), &[1.0, 2.0, 3.0, 5.0], &cfg, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err.error, Error::DimensionMismatch { .. }));
        assert!(err.trace.instances.is_empty());
    }

    #[test]
    fn short_flexstep_run_accounting() {
        let spec = case_study();
        let cfg = FlexStepConfig {
            initial_guess: Some(vec![1.0; 20]),
            max_steps: 20,
            ..Default::default()
        };
        let trace = flexible_step_run(&spec, &[1.0, 2.0, 3.0, 5.0], &cfg, &SolverOptions::default()).unwrap();
        let steps: usize = trace.implemented_steps().iter().sum();
        assert_eq!(steps, trace.final_k() - trace.k0);
        assert!(trace.implemented_steps().iter().all(|l| (1..=10).contains(l)));
        let replay = replay_states(&spec.model, &trace).unwrap();
        assert_eq!(replay, trace.states());
        assert!(check_subsequence_decrease(&trace, 1e-8).is_ok());
    }

    #[test]
    fn standard_run_fixed_steps() {
        let spec = case_study();
        let trace = standard_run(
            &spec,
            &[1.0, 2.0, 3.0, 5.0],
            22.0,
            10,
            30,
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(trace.instances.len(), 3);
        assert!(trace.implemented_steps().iter().all(|l| *l == 10));
        assert_eq!(trace.final_k(), 30);
        assert!(standard_run(&spec, &[1.0; 4], 22.0, 11, 30, None, &SolverOptions::default()).is_err());
        assert!(standard_run(&spec, &[1.0; 4], 0.0, 10, 30, None, &SolverOptions::default()).is_err());
    }
}
