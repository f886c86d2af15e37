//! Single-shooting transcription of the finite-horizon optimal control
//! problems into [`Problem`]s over stacked input sequences.
//!
//! Two instances are supported:
//!
//! * the flexible-step problem: stage cost over `Np` steps, terminal cost,
//!   state/terminal boxes and the average decrease constraint (adc) over `m`
//!   predicted Lyapunov values, with `N = max(q + m, Np)` decision inputs;
//! * the standard terminal-cost problem `Σ f0 + γ‖x^Np‖²` with `Np` inputs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lyapunov::{case_study_weights, GdclfSpec};
use crate::model::{brockett_variant, BoxSet, SystemModel};
use crate::nlp::Problem;

type StateInputFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Stage cost `f0(x, u)`.
#[derive(Clone)]
pub enum StageCost {
    /// `q‖x‖² + r‖u‖²`.
    Quadratic {
        state_weight: f64,
        input_weight: f64,
    },
    Custom {
        label: String,
        f: StateInputFn,
    },
}

impl StageCost {
    pub fn eval(&self, x: &[f64], u: &[f64]) -> f64 {
        match self {
            StageCost::Quadratic {
                state_weight,
                input_weight,
            } => {
                state_weight * x.iter().map(|v| v * v).sum::<f64>()
                    + input_weight * u.iter().map(|v| v * v).sum::<f64>()
            }
            StageCost::Custom { f, .. } => f(x, u),
        }
    }

    /// Human-readable identity, used to check that traces are comparable.
    pub fn describe(&self) -> String {
        match self {
            StageCost::Quadratic {
                state_weight,
                input_weight,
            } => format!("quadratic(state={state_weight},input={input_weight})"),
            StageCost::Custom { label, .. } => format!("custom({label})"),
        }
    }
}

impl fmt::Debug for StageCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// Terminal cost `φ(x)`.
#[derive(Clone)]
pub enum TerminalCost {
    Zero,
    /// `w‖x‖²`.
    Quadratic(f64),
    Custom {
        label: String,
        f: StateFn,
    },
}

impl TerminalCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
            TerminalCost::Quadratic(w) => w * x.iter().map(|v| v * v).sum::<f64>(),
            TerminalCost::Custom { f, .. } => f(x),
        }
    }
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalCost::Zero => f.write_str("zero"),
            TerminalCost::Quadratic(w) => write!(f, "quadratic({w})"),
            TerminalCost::Custom { label, .. } => write!(f, "custom({label})"),
        }
    }
}

/// Initial state of the Brockett case study.
pub const CASE_STUDY_X0: [f64; 4] = [1.0, 2.0, 3.0, 5.0];

/// The Brockett case study: horizon 10, `f0 = ‖x‖² + 5‖u‖²`, `V = ‖x‖²`,
/// `α = 1e-5‖x‖⁴`, adc weights 5.5 on `V₃…V₆`, no constraint sets.
pub fn case_study_spec() -> OcpSpec {
    OcpSpec::new(
        brockett_variant(),
        10,
        StageCost::Quadratic {
            state_weight: 1.0,
            input_weight: 5.0,
        },
        TerminalCost::Zero,
        GdclfSpec::squared_norm(case_study_weights(), 1e-5).expect("valid weights"),
    )
    .expect("valid case study")
}

/// Finite-horizon problem data shared by every optimization instance.
#[derive(Debug, Clone)]
pub struct OcpSpec {
    pub model: SystemModel,
    pub horizon: usize,
    pub stage_cost: StageCost,
    pub terminal_cost: TerminalCost,
    pub input_set: BoxSet,
    pub state_set: BoxSet,
    pub terminal_set: BoxSet,
    pub gdclf: GdclfSpec,
}

impl OcpSpec {
    /// Unconstrained problem (`U = ℝᵖ`, `X = X^Np = ℝⁿ`).
    pub fn new(
        model: SystemModel,
        horizon: usize,
        stage_cost: StageCost,
        terminal_cost: TerminalCost,
        gdclf: GdclfSpec,
    ) -> Result<Self> {
        let (n, p) = (model.state_dim(), model.input_dim());
        let spec = Self {
            model,
            horizon,
            stage_cost,
            terminal_cost,
            input_set: BoxSet::unbounded(p),
            state_set: BoxSet::unbounded(n),
            terminal_set: BoxSet::unbounded(n),
            gdclf,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sets(mut self, input_set: BoxSet, state_set: BoxSet, terminal_set: BoxSet) -> Result<Self> {
        self.input_set = input_set;
        self.state_set = state_set;
        self.terminal_set = terminal_set;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.model.state_dim(), self.model.input_dim());
        let (m, q) = (self.gdclf.order(), self.gdclf.window());
        if self.horizon == 0 {
            return Err(Error::ContractViolation("prediction horizon must be at least 1".into()));
        }
        if m > self.horizon {
            return Err(Error::ContractViolation(format!(
                "g-dclf order {m} exceeds the horizon {}",
                self.horizon
            )));
        }
        if q > self.horizon {
            return Err(Error::ContractViolation(format!(
                "input window {q} exceeds the horizon {}",
                self.horizon
            )));
        }
        check_dim("input set", p, self.input_set.dim())?;
        check_dim("state set", n, self.state_set.dim())?;
        check_dim("terminal set", n, self.terminal_set.dim())?;
        for (name, set) in [
            ("input set", &self.input_set),
            ("state set", &self.state_set),
            ("terminal set", &self.terminal_set),
        ] {
            if !set.origin_is_interior() {
                return Err(Error::ContractViolation(format!(
                    "{name} must contain the origin in its interior"
                )));
            }
        }
        Ok(())
    }

    /// `N = max(q + m, Np)`.
    pub fn flex_inputs(&self) -> usize {
        (self.gdclf.window() + self.gdclf.order()).max(self.horizon)
    }

    pub fn with_model(&self, model: SystemModel) -> Self {
        Self { model, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    FlexStep { u_prev: Vec<f64>, v0: f64, alpha0: f64 },
    Standard { gamma: f64 },
}

/// One optimization instance, frozen at the current state.
#[derive(Debug, Clone)]
pub struct NlpInstance {
    spec: OcpSpec,
    x: Vec<f64>,
    kind: Kind,
    inputs: usize,
    bounds: Option<BoxSet>,
    num_constraints: usize,
    adc_margin: f64,
}

fn check_state(spec: &OcpSpec, x: &[f64]) -> Result<()> {
    check_dim("state", spec.model.state_dim(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::ContractViolation("state is not finite".into()));
    }
    if !spec.state_set.contains(x) {
        return Err(Error::ContractViolation(format!("state {x:?} lies outside X")));
    }
    Ok(())
}

fn stacked_bounds(set: &BoxSet, count: usize) -> Option<BoxSet> {
    if set.is_unbounded() {
        return None;
    }
    let lower = set.lower().repeat(count);
    let upper = set.upper().repeat(count);
    Some(BoxSet::new(lower, upper).expect("valid repeated box"))
}

/// Flexible-step instance at state `x` with previous window `u_prev`
/// (`q · p` entries; empty when `q = 0`).
pub fn build_flexstep_nlp(spec: &OcpSpec, x: &[f64], u_prev: &[f64]) -> Result<NlpInstance> {
    spec.validate()?;
    check_state(spec, x)?;
    let p = spec.model.input_dim();
    check_dim("previous input window", spec.gdclf.window() * p, u_prev.len())?;
    let inputs = spec.flex_inputs();
    let v0 = spec.gdclf.v(x, u_prev);
    let alpha0 = spec.gdclf.alpha(x, u_prev);
    let horizon = spec.horizon;
    let num_constraints =
        spec.state_set.finite_bound_count() * (horizon - 1) + spec.terminal_set.finite_bound_count() + 1;
    Ok(NlpInstance {
        bounds: stacked_bounds(&spec.input_set, inputs),
        spec: spec.clone(),
        x: x.to_vec(),
        kind: Kind::FlexStep {
            u_prev: u_prev.to_vec(),
            v0,
            alpha0,
        },
        inputs,
        num_constraints,
        adc_margin: 0.0,
    })
}

/// Standard terminal-cost instance `Σ f0 + γ‖x^Np‖²` at state `x`.
pub fn build_standard_nlp(spec: &OcpSpec, x: &[f64], gamma: f64) -> Result<NlpInstance> {
    spec.validate()?;
    check_state(spec, x)?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::ContractViolation(format!(
            "terminal weight must be positive, got {gamma}"
        )));
    }
    let horizon = spec.horizon;
    let num_constraints = spec.state_set.finite_bound_count() * (horizon - 1) + spec.terminal_set.finite_bound_count();
    Ok(NlpInstance {
        bounds: stacked_bounds(&spec.input_set, horizon),
        spec: spec.clone(),
        x: x.to_vec(),
        kind: Kind::Standard { gamma },
        inputs: horizon,
        num_constraints,
        adc_margin: 0.0,
    })
}

impl NlpInstance {
    /// Imposes `adc + margin ≤ 0` in the constraint vector, so that points
    /// accepted within a solver tolerance of `margin` satisfy the exact adc.
    /// [`NlpInstance::adc_value`] keeps reporting the plain residual.
    pub fn with_adc_margin(mut self, margin: f64) -> Self {
        self.adc_margin = margin.max(0.0);
        self
    }

    pub fn spec(&self) -> &OcpSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Number of stacked inputs (`N` for flexible-step, `Np` for standard).
    pub fn input_count(&self) -> usize {
        self.inputs
    }

    pub fn is_flexstep(&self) -> bool {
        matches!(self.kind, Kind::FlexStep { .. })
    }

    pub fn previous_window(&self) -> &[f64] {
        match &self.kind {
            Kind::FlexStep { u_prev, .. } => u_prev,
            Kind::Standard { .. } => &[],
        }
    }

    /// Frozen `(V(x⁰, u*⁻), α(x⁰, u*⁻))`; `None` for standard instances.
    pub fn frozen_lyapunov(&self) -> Option<(f64, f64)> {
        match self.kind {
            Kind::FlexStep { v0, alpha0, .. } => Some((v0, alpha0)),
            Kind::Standard { .. } => None,
        }
    }

    /// Predicted states `x⁰ … x^Np`, flattened.
    pub fn predicted_states(&self, z: &[f64]) -> Vec<f64> {
        self.spec.model.rollout_flat(&self.x, z, self.spec.horizon)
    }

    /// `[V₁ … Vₘ]` along the prediction of `z`.
    pub fn lyapunov_values(&self, z: &[f64]) -> Vec<f64> {
        let states = self.predicted_states(z);
        self.lyapunov_from_states(&states, z)
    }

    fn lyapunov_from_states(&self, states: &[f64], z: &[f64]) -> Vec<f64> {
        let (n, p) = (self.spec.model.state_dim(), self.spec.model.input_dim());
        let g = &self.spec.gdclf;
        let q = g.window();
        (1..=g.order())
            .map(|l| g.v(&states[l * n..(l + 1) * n], &z[l * p..(l + q) * p]))
            .collect()
    }

    /// adc residual of `z`; `None` for standard instances.
    pub fn adc_value(&self, z: &[f64]) -> Option<f64> {
        let (v0, alpha0) = self.frozen_lyapunov()?;
        Some(self.spec.gdclf.adc_residual(v0, alpha0, &self.lyapunov_values(z)))
    }
}

impl Problem for NlpInstance {
    fn dim(&self) -> usize {
        self.inputs * self.spec.model.input_dim()
    }

    fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let mut cons = vec![0.0; self.num_constraints];
        self.evaluate(z, &mut cons)
    }

    fn constraints(&self, z: &[f64], out: &mut [f64]) {
        self.evaluate(z, out);
    }

    fn bounds(&self) -> Option<&BoxSet> {
        self.bounds.as_ref()
    }

    fn evaluate(&self, z: &[f64], cons: &mut [f64]) -> f64 {
        let spec = &self.spec;
        let (n, p) = (spec.model.state_dim(), spec.model.input_dim());
        let np = spec.horizon;
        let states = self.predicted_states(z);
        let state = |j: usize| &states[j * n..(j + 1) * n];

        let mut cost = 0.0;
        for j in 0..np {
            cost += spec.stage_cost.eval(state(j), &z[j * p..(j + 1) * p]);
        }
        cost += match self.kind {
            Kind::FlexStep { .. } => spec.terminal_cost.eval(state(np)),
            Kind::Standard { gamma } => gamma * state(np).iter().map(|v| v * v).sum::<f64>(),
        };

        let mut residuals = Vec::with_capacity(self.num_constraints);
        for j in 1..np {
            spec.state_set.push_residuals(state(j), &mut residuals);
        }
        spec.terminal_set.push_residuals(state(np), &mut residuals);
        if let Kind::FlexStep { v0, alpha0, .. } = self.kind {
            let vseq = self.lyapunov_from_states(&states, z);
            residuals.push(spec.gdclf.adc_residual(v0, alpha0, &vseq) + self.adc_margin);
        }
        cons.copy_from_slice(&residuals);
        cost
    }
}

/// Padding used when shifting a previous optimum into a warm start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmStartPad {
    #[default]
    Zeros,
    RepeatLast,
}

/// Drops the first `l` inputs of `u_star` (flattened, `p` entries each) and
/// appends `l` padding inputs.
pub fn shift_warm_start(u_star: &[f64], p: usize, l: usize, pad: WarmStartPad) -> Result<Vec<f64>> {
    if p == 0 || !u_star.len().is_multiple_of(p) {
        return Err(Error::ContractViolation(format!(
            "sequence of length {} is not a whole number of {p}-inputs",
            u_star.len()
        )));
    }
    let count = u_star.len() / p;
    if l == 0 || l > count {
        return Err(Error::ContractViolation(format!("shift {l} outside 1..={count}")));
    }
    let mut out = u_star[l * p..].to_vec();
    let fill: Vec<f64> = match pad {
        WarmStartPad::Zeros => vec![0.0; p],
        WarmStartPad::RepeatLast => u_star[(count - 1) * p..].to_vec(),
    };
    for _ in 0..l {
        out.extend_from_slice(&fill);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::squared_norm;
    use crate::model::brockett_variant;

    fn case_study() -> OcpSpec {
        case_study_spec()
    }

    #[test]
    fn case_study_instance_shape() {
        let spec = case_study();
        let inst = build_flexstep_nlp(&spec, &[1.0, 2.0, 3.0, 5.0], &[]).unwrap();
        assert_eq!(inst.dim(), 20);
        assert_eq!(inst.num_constraints(), 1);
        assert!(inst.bounds().is_none());
        assert_eq!(inst.frozen_lyapunov().unwrap().0, 39.0);
    }

    #[test]
    fn objective_by_hand_with_zero_inputs() {
        let spec = case_study();
        let x0 = [1.0, 2.0, 3.0, 5.0];
        let inst = build_flexstep_nlp(&spec, &x0, &[]).unwrap();
        let z = vec![0.0; 20];
        // Zero input: only x₄ moves, x₄ ← 1.1 x₄.
        let mut expected = 0.0;
        let mut x4: f64 = 5.0;
        let mut vs = Vec::new();
        for _ in 0..10 {
            expected += 14.0 + x4 * x4;
            x4 *= 1.1;
            vs.push(14.0 + x4 * x4);
        }
        assert!((inst.objective(&z) - expected).abs() < 1e-9);
        let adc = 0.55 * (vs[2] + vs[3] + vs[4] + vs[5]) - 39.0 + 1e-5 * 39.0 * 39.0;
        assert!((inst.adc_value(&z).unwrap() - adc).abs() < 1e-9);
        let mut c = [0.0];
        inst.constraints(&z, &mut c);
        assert_eq!(c[0], inst.adc_value(&z).unwrap());
    }

    #[test]
    fn origin_is_feasible() {
        let spec = case_study();
        let inst = build_flexstep_nlp(&spec, &[0.0; 4], &[]).unwrap();
        let z = vec![0.0; 20];
        assert_eq!(inst.objective(&z), 0.0);
        assert!(inst.adc_value(&z).unwrap() <= 0.0);
        let std = build_standard_nlp(&spec, &[0.0; 4], 22.0).unwrap();
        assert_eq!(std.objective(&[0.0; 20]), 0.0);
    }

    #[test]
    fn standard_instance() {
        let spec = case_study();
        let inst = build_standard_nlp(&spec, &[1.0, 2.0, 3.0, 5.0], 22.0).unwrap();
        assert_eq!(inst.dim(), 20);
        assert_eq!(inst.num_constraints(), 0);
        assert!(inst.adc_value(&[0.0; 20]).is_none());
        let z = vec![0.1; 20];
        let xs = inst.predicted_states(&z);
        let mut by_hand = 0.0;
        for j in 0..10 {
            by_hand += squared_norm(&xs[4 * j..4 * j + 4]) + 5.0 * 0.02;
        }
        by_hand += 22.0 * squared_norm(&xs[40..44]);
        assert!((inst.objective(&z) - by_hand).abs() < 1e-9);
        assert!(build_standard_nlp(&spec, &[0.0; 4], 0.0).is_err());
        assert!(build_standard_nlp(&spec, &[0.0; 4], -1.0).is_err());
    }

    #[test]
    fn extra_inputs_beyond_horizon() {
        // q + m > Np: trailing inputs only enter the adc.
        let gdclf = GdclfSpec::new(
            3,
            2,
            vec![1.0, 1.0, 1.0],
            Arc::new(|x, w| squared_norm(x) + squared_norm(w)),
            Arc::new(|x, _| 1e-3 * squared_norm(x)),
        )
        .unwrap();
        let spec = OcpSpec::new(
            brockett_variant(),
            3,
            StageCost::Quadratic {
                state_weight: 1.0,
                input_weight: 1.0,
            },
            TerminalCost::Zero,
            gdclf,
        )
        .unwrap();
        let inst = build_flexstep_nlp(&spec, &[0.5, 0.0, 0.0, 0.2], &[0.0; 4]).unwrap();
        assert_eq!(inst.input_count(), 5);
        let mut z = vec![0.3; 10];
        let f_a = inst.objective(&z);
        let c_a = inst.adc_value(&z).unwrap();
        z[8] = 4.0;
        assert_eq!(inst.objective(&z), f_a);
        assert!(inst.adc_value(&z).unwrap() > c_a);
    }

    #[test]
    fn box_constraints_enter_as_residuals() {
        let spec = case_study()
            .with_sets(
                BoxSet::symmetric(2, 3.0).unwrap(),
                BoxSet::symmetric(4, 10.0).unwrap(),
                BoxSet::symmetric(4, 8.0).unwrap(),
            )
            .unwrap();
        let inst = build_flexstep_nlp(&spec, &[1.0, 2.0, 3.0, 5.0], &[]).unwrap();
        assert_eq!(inst.num_constraints(), 8 * 9 + 8 + 1);
        assert_eq!(inst.bounds().unwrap().dim(), 20);
        // Zero inputs drive x₄ = 5·1.1¹⁰ ≈ 12.97 outside the terminal box.
        let mut c = vec![0.0; inst.num_constraints()];
        inst.constraints(&[0.0; 20], &mut c);
        assert!(c[8 * 9 + 7] > 0.0);
        assert!(build_flexstep_nlp(&spec, &[11.0, 0.0, 0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = OcpSpec::new(
            brockett_variant(),
            5,
            StageCost::Quadratic {
                state_weight: 1.0,
                input_weight: 1.0,
            },
            TerminalCost::Zero,
            GdclfSpec::squared_norm(case_study_weights(), 1e-5).unwrap(),
        );
        assert!(bad.is_err());
        let spec = case_study();
        assert!(spec
            .clone()
            .with_sets(
                BoxSet::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap(),
                BoxSet::unbounded(4),
                BoxSet::unbounded(4)
            )
            .is_err());
        assert!(build_flexstep_nlp(&spec, &[0.0; 4], &[0.0; 2]).is_err());
    }

    #[test]
    fn warm_start_shift() {
        let u = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        assert_eq!(
            shift_warm_start(&u, 2, 1, WarmStartPad::Zeros).unwrap(),
            vec![2.0, 20.0, 3.0, 30.0, 0.0, 0.0]
        );
        assert_eq!(shift_warm_start(&u, 2, 3, WarmStartPad::Zeros).unwrap(), vec![0.0; 6]);
        assert_eq!(
            shift_warm_start(&u, 2, 2, WarmStartPad::RepeatLast).unwrap(),
            vec![3.0, 30.0, 3.0, 30.0, 3.0, 30.0]
        );
        assert!(shift_warm_start(&u, 2, 0, WarmStartPad::Zeros).is_err());
        assert!(shift_warm_start(&u, 2, 4, WarmStartPad::Zeros).is_err());
        assert!(shift_warm_start(&u, 4, 1, WarmStartPad::Zeros).is_err());
    }
}
