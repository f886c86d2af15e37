//! Experiment configuration: JSON schema, built-in presets and translation
//! into core types.
//!
//! A config file must name its `scenario`; every other field falls back to
//! that scenario's preset, recursively per object. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ValueEnum;
use flexmpc::lyapunov::{case_study_weights, finite_step_weights, squared_norm, SearchMethod, WindowFn};
use flexmpc::model::brockett_variant_with_h;
use flexmpc::mpc::FlexStepConfig;
use flexmpc::{DescentPolicy, GdclfSpec, OcpSpec, SolverOptions, StageCost, TerminalCost};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Flexible-step closed loop of the Brockett case study.
    Problem3,
    /// Standard terminal-cost MPC, one run per γ.
    Problem4,
    /// Sampled g-dclf verification.
    GdclfVerify,
    /// Residual probe of Brockett's condition.
    BrockettProbe,
    /// Flexible-step run plus optional standard runs, all numbers user-supplied.
    Custom,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Problem3,
        Scenario::Problem4,
        Scenario::GdclfVerify,
        Scenario::BrockettProbe,
        Scenario::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Problem3 => "problem3",
            Scenario::Problem4 => "problem4",
            Scenario::GdclfVerify => "gdclf-verify",
            Scenario::BrockettProbe => "brockett-probe",
            Scenario::Custom => "custom",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Scenario::Problem3 => "flexible-step MPC on the Brockett variant from x0=[1,2,3,5]",
            Scenario::Problem4 => "standard MPC with terminal weights 22, 480, 1920 (10 steps per instance)",
            Scenario::GdclfVerify => "verify V=|x|^2 as a finite-step g-dclf (m=10) on 5 random states",
            Scenario::BrockettProbe => "minimize |phi(x,u) - [0,0,0,-0.01]| over [-1,1]^6",
            Scenario::Custom => "flexible-step run with user numbers, plus standard runs for any listed gammas",
        }
    }
}

/// The Brockett variant is the only built-in system, so the dimensions are
/// checked rather than chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub h: f64,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            h: 0.1,
            state_dim: 4,
            input_dim: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    /// Prediction horizon `Np`.
    pub horizon: usize,
    /// g-dclf order `m`.
    pub order: usize,
    /// Input window length `q`. For `q > 0`, `V(x, w) = ‖x‖² + ‖w‖²`.
    pub window: usize,
    pub sigma: Vec<f64>,
    /// `α = ε‖x‖⁴`.
    pub epsilon: f64,
    pub state_weight: f64,
    pub input_weight: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            order: 10,
            window: 0,
            sigma: case_study_weights(),
            epsilon: 1e-5,
            state_weight: 1.0,
            input_weight: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub x0: Vec<f64>,
    /// Solver start for the first instance; `null` means zeros.
    pub initial_guess: Option<Vec<f64>>,
    pub policy: DescentPolicy,
    pub max_steps: usize,
    pub stop_radius: f64,
    pub cold_start: bool,
    pub multistart: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Terminal weights of the standard runs.
    pub gammas: Vec<f64>,
    pub steps_per_instance: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            x0: vec![1.0, 2.0, 3.0, 5.0],
            initial_guess: Some(vec![1.0; 20]),
            policy: DescentPolicy::GreatestDescent,
            max_steps: 300,
            stop_radius: 1e-3,
            cold_start: false,
            multistart: 0,
            restarts: 4,
            seed: 0,
            gammas: Vec::new(),
            steps_per_instance: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// States per seed.
    pub samples: usize,
    /// States are uniform in `[-state_range, state_range]ⁿ`.
    pub state_range: f64,
    /// One independent verification per seed.
    pub seeds: Vec<u64>,
    pub method: SearchMethod,
    pub input_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            state_range: 2.0,
            seeds: vec![7],
            method: SearchMethod::Nlp { restarts: 50 },
            input_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub y4: f64,
    /// Half-width of the search box `[-radius, radius]⁶`.
    pub radius: f64,
    pub grid: usize,
    pub refine: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            y4: 0.01,
            radius: 1.0,
            grid: 21,
            refine: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ocp: OcpConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn preset(scenario: Scenario) -> Self {
        let mut cfg = Self {
            scenario,
            model: ModelConfig::default(),
            ocp: OcpConfig::default(),
            solver: SolverOptions::default(),
            run: RunConfig::default(),
            verify: VerifyConfig::default(),
            probe: ProbeConfig::default(),
            output_dir: PathBuf::from("out").join(scenario.name()),
        };
        match scenario {
            Scenario::Problem4 => cfg.run.gammas = vec![22.0, 480.0, 1920.0],
            Scenario::GdclfVerify => cfg.ocp.sigma = finite_step_weights(10),
            _ => {}
        }
        cfg
    }

    pub fn preset_by_name(name: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .map(Self::preset)
            .ok_or_else(|| {
                let names: Vec<&str> = Scenario::ALL.iter().map(|s| s.name()).collect();
                CliError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
            })
    }

    /// Pretty JSON; [`parse_config`] reads it back unchanged.
    pub fn emit(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.model.state_dim != 4 || self.model.input_dim != 2 {
            return bad(format!(
                "model: the Brockett variant has state_dim 4 and input_dim 2, got {} and {}",
                self.model.state_dim, self.model.input_dim
            ));
        }
        self.solver
            .validate()
            .map_err(|e| CliError::Config(format!("solver: {e}")))?;
        match self.scenario {
            Scenario::BrockettProbe => {
                let p = &self.probe;
                if !(p.radius.is_finite() && p.radius > 0.0) || p.grid < 2 {
                    return bad("probe: radius must be positive and grid at least 2".into());
                }
                if !(p.y4.is_finite() && p.y4 >= 0.0) {
                    return bad(format!("probe.y4 must be non-negative, got {}", p.y4));
                }
                return Ok(());
            }
            Scenario::GdclfVerify => {
                self.gdclf()?;
                let v = &self.verify;
                if v.seeds.is_empty() || v.samples == 0 {
                    return bad("verify: need at least one seed and one sample".into());
                }
                if !(v.state_range.is_finite() && v.state_range > 0.0) {
                    return bad(format!("verify.state_range must be positive, got {}", v.state_range));
                }
                return Ok(());
            }
            _ => {}
        }
        self.ocp_spec()?;
        let r = &self.run;
        if r.x0.len() != self.model.state_dim {
            return bad(format!(
                "run.x0: expected {} entries, got {}",
                self.model.state_dim,
                r.x0.len()
            ));
        }
        if !(r.stop_radius.is_finite() && r.stop_radius >= 0.0) {
            return bad(format!("run.stop_radius must be non-negative, got {}", r.stop_radius));
        }
        if r.max_steps == 0 {
            return bad("run.max_steps must be positive".into());
        }
        if let Some(g) = &r.initial_guess {
            // Standard instances use Np inputs, flexible-step ones max(Np, q + m).
            let flex = self.ocp.horizon.max(self.ocp.window + self.ocp.order) * self.model.input_dim;
            if self.scenario != Scenario::Problem4 && g.len() != flex {
                return bad(format!("run.initial_guess: expected {flex} entries, got {}", g.len()));
            }
        }
        if self.scenario == Scenario::Problem4 && r.gammas.is_empty() {
            return bad("run.gammas: problem4 needs at least one terminal weight".into());
        }
        if r.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad(format!("run.gammas must be non-negative, got {:?}", r.gammas));
        }
        if !r.gammas.is_empty() && !(1..=self.ocp.horizon).contains(&r.steps_per_instance) {
            return bad(format!(
                "run.steps_per_instance must lie in 1..={}, got {}",
                self.ocp.horizon, r.steps_per_instance
            ));
        }
        Ok(())
    }

    pub fn gdclf(&self) -> Result<GdclfSpec> {
        let o = &self.ocp;
        if o.sigma.len() != o.order {
            return Err(CliError::Config(format!(
                "ocp.sigma: expected {} weights (ocp.order), got {}",
                o.order,
                o.sigma.len()
            )));
        }
        let spec = if o.window == 0 {
            GdclfSpec::squared_norm(o.sigma.clone(), o.epsilon)
        } else {
            if !(o.epsilon.is_finite() && o.epsilon >= 0.0) {
                return Err(CliError::Config(format!(
                    "ocp.epsilon must be non-negative, got {}",
                    o.epsilon
                )));
            }
            let eps = o.epsilon;
            let v: WindowFn = Arc::new(|x: &[f64], w: &[f64]| squared_norm(x) + squared_norm(w));
            let alpha: WindowFn = Arc::new(move |x: &[f64], _: &[f64]| eps * squared_norm(x).powi(2));
            GdclfSpec::new(o.order, o.window, o.sigma.clone(), v, alpha)
        };
        spec.map_err(|e| CliError::Config(format!("ocp: {e}")))
    }

    pub fn stage_cost(&self) -> StageCost {
        StageCost::Quadratic {
            state_weight: self.ocp.state_weight,
            input_weight: self.ocp.input_weight,
        }
    }

    pub fn ocp_spec(&self) -> Result<OcpSpec> {
        if !(self.model.h.is_finite() && self.model.h > 0.0) {
            return Err(CliError::Config(format!(
                "model.h must be positive, got {}",
                self.model.h
            )));
        }
        let model = brockett_variant_with_h(self.model.h);
        OcpSpec::new(
            model,
            self.ocp.horizon,
            self.stage_cost(),
            TerminalCost::Zero,
            self.gdclf()?,
        )
        .map_err(|e| CliError::Config(format!("ocp: {e}")))
    }

    pub fn flexstep_config(&self) -> FlexStepConfig {
        let r = &self.run;
        FlexStepConfig {
            policy: r.policy,
            initial_guess: r.initial_guess.clone(),
            cold_start: r.cold_start,
            max_steps: r.max_steps,
            stop_radius: r.stop_radius,
            multistart: r.multistart,
            restarts: r.restarts,
            seed: r.seed,
            ..FlexStepConfig::default()
        }
    }

    /// First-instance guess for standard runs: the configured guess cut or
    /// zero-padded to `Np` inputs.
    pub fn standard_guess(&self) -> Option<Vec<f64>> {
        let len = self.ocp.horizon * self.model.input_dim;
        self.run.initial_guess.as_ref().map(|g| {
            let mut g = g.clone();
            g.resize(len, 0.0);
            g
        })
    }
}

/// Parses a config document. Schema errors carry the line and column of the
/// offending token.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    // Strict pass against the schema, for anchored messages.
    let strict: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    // Fill omitted fields from the scenario preset, object by object.
    let mut merged = serde_json::to_value(ExperimentConfig::preset(strict.scenario))?;
    let given: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    overlay(&mut merged, given);
    let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    // Enum-like objects (e.g. the search method) are replaced whole.
                    Some(slot) if slot.is_object() && v.is_object() && k != "method" => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
