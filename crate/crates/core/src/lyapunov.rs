//! Generalized discrete-time control Lyapunov functions (g-dclf).
//!
//! A g-dclf of order `m` is a function `V(x, w)` of the state and an input
//! window `w` of length `q` (empty for `q = 0`) whose σ-weighted average over
//! the next `m` predicted steps drops by at least `α(x, w)`:
//!
//! ```text
//! (σ₁V₁ + … + σₘVₘ)/m − V₀ ≤ −α₀,   σᵢ ≥ 0,   (σ₁ + … + σₘ)/m ≥ 1.
//! ```
//!
//! This average decrease constraint (adc) forces at least one `Vₗ ≤ V₀ − α₀`,
//! which is what the flexible-step controller implements up to.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::SystemModel;
use crate::nlp::{minimize, FnProblem, SolverOptions};

/// Evaluator `(state, flattened input window) → ℝ`.
pub type WindowFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Default slack when deciding whether an index achieves descent.
pub const DESCENT_TOL: f64 = 1e-8;

/// A g-dclf candidate with its adc weights.
#[derive(Clone)]
pub struct GdclfSpec {
    order: usize,
    window: usize,
    sigma: Vec<f64>,
    v: WindowFn,
    alpha: WindowFn,
}

impl fmt::Debug for GdclfSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GdclfSpec")
            .field("order", &self.order)
            .field("window", &self.window)
            .field("sigma", &self.sigma)
            .finish_non_exhaustive()
    }
}

impl GdclfSpec {
    /// `order` is `m`, `window` is `q`.
    pub fn new(order: usize, window: usize, sigma: Vec<f64>, v: WindowFn, alpha: WindowFn) -> Result<Self> {
        if order == 0 {
            return Err(Error::ContractViolation("g-dclf order must be at least 1".into()));
        }
        check_dim("adc weights", order, sigma.len())?;
        if !check_sigma(&sigma, order) {
            return Err(Error::ContractViolation(format!(
                "adc weights must be non-negative with mean at least 1, got {sigma:?}"
            )));
        }
        Ok(Self {
            order,
            window,
            sigma,
            v,
            alpha,
        })
    }

    /// `V(x) = ‖x‖²`, `α(x) = ε‖x‖⁴`, `q = 0`.
    pub fn squared_norm(sigma: Vec<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::ContractViolation(format!(
                "alpha scale must be non-negative, got {epsilon}"
            )));
        }
        let order = sigma.len();
        Self::new(
            order,
            0,
            sigma,
            Arc::new(|x, _| squared_norm(x)),
            Arc::new(move |x, _| {
                let s = squared_norm(x);
                epsilon * s * s
            }),
        )
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn v(&self, x: &[f64], window: &[f64]) -> f64 {
        (self.v)(x, window)
    }

    pub fn alpha(&self, x: &[f64], window: &[f64]) -> f64 {
        (self.alpha)(x, window)
    }

    /// `(Σ σᵢVᵢ)/m − V₀ + α₀`; the adc holds iff this is `≤ 0`.
    pub fn adc_residual(&self, v0: f64, alpha0: f64, vseq: &[f64]) -> f64 {
        adc_residual(&self.sigma, v0, alpha0, vseq)
    }
}

/// Weights `[0, …, 0, m]`: only the m-th value counts (finite-step descent).
pub fn finite_step_weights(m: usize) -> Vec<f64> {
    let mut sigma = vec![0.0; m];
    if let Some(last) = sigma.last_mut() {
        *last = m as f64;
    }
    sigma
}

/// Weights used by the Brockett case study: `5.5` on `V₃…V₆` of ten.
pub fn case_study_weights() -> Vec<f64> {
    let mut sigma = vec![0.0; 10];
    sigma[2..6].iter_mut().for_each(|s| *s = 5.5);
    sigma
}

pub fn squared_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// True iff every weight is non-negative and their mean is at least 1.
pub fn check_sigma(sigma: &[f64], m: usize) -> bool {
    if m == 0 || sigma.len() != m {
        return false;
    }
    sigma.iter().all(|s| *s >= 0.0) && sigma.iter().sum::<f64>() / m as f64 >= 1.0
}

/// `(Σ σᵢVᵢ)/m − V₀ + α₀` with `m = σ.len()`.
pub fn adc_residual(sigma: &[f64], v0: f64, alpha0: f64, vseq: &[f64]) -> f64 {
    debug_assert_eq!(sigma.len(), vseq.len());
    let m = sigma.len() as f64;
    let avg: f64 = sigma.iter().zip(vseq).map(|(s, v)| s * v).sum::<f64>() / m;
    avg - v0 + alpha0
}

/// All 1-based indices `l` with `Vₗ − V₀ ≤ −α₀ + tol`.
pub fn descent_indices(v0: f64, alpha0: f64, vseq: &[f64], tol: f64) -> Vec<usize> {
    vseq.iter()
        .enumerate()
        .filter(|(_, v)| *v - v0 <= -alpha0 + tol)
        .map(|(i, _)| i + 1)
        .collect()
}

/// How `ℓ_decr` is picked among the descent indices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescentPolicy {
    /// The index with the smallest predicted value (ties → smallest index).
    #[default]
    GreatestDescent,
    /// The smallest qualifying index.
    FirstDescent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub indices: Vec<usize>,
    pub chosen: usize,
    /// `V₀ − α₀ − V_chosen`.
    pub margin: f64,
}

/// Picks `ℓ_decr` from `vseq = [V₁ … Vₘ]`.
///
/// Fails with [`Error::DescentNotFound`] when no index qualifies; the error
/// carries the best margin `max_l (V₀ − α₀ − Vₗ)`.
pub fn select_index(v0: f64, alpha0: f64, vseq: &[f64], policy: DescentPolicy, tol: f64) -> Result<DescentReport> {
    let indices = descent_indices(v0, alpha0, vseq, tol);
    let margin_of = |l: usize| v0 - alpha0 - vseq[l - 1];
    if indices.is_empty() {
        let best_margin = (1..=vseq.len()).map(margin_of).fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::DescentNotFound { best_margin });
    }
    let chosen = match policy {
        DescentPolicy::FirstDescent => indices[0],
        DescentPolicy::GreatestDescent => {
            let mut best = indices[0];
            for &l in &indices[1..] {
                if vseq[l - 1] < vseq[best - 1] {
                    best = l;
                }
            }
            best
        }
    };
    Ok(DescentReport {
        margin: margin_of(chosen),
        indices,
        chosen,
    })
}

/// Predicted values `[V₁ … Vₘ]` along `inputs` (flattened, at least `(q+m)·p` entries) from `x0`.
pub fn predicted_values(model: &SystemModel, spec: &GdclfSpec, x0: &[f64], inputs: &[f64]) -> Vec<f64> {
    let (n, p) = (model.state_dim(), model.input_dim());
    let (m, q) = (spec.order(), spec.window());
    let states = model.rollout_flat(x0, inputs, m);
    (1..=m)
        .map(|l| spec.v(&states[l * n..(l + 1) * n], &inputs[l * p..(l + q) * p]))
        .collect()
}

/// One state to verify, with its input window (empty for `q = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct GdclfSample {
    pub state: Vec<f64>,
    pub window: Vec<f64>,
}

impl GdclfSample {
    pub fn state_only(state: Vec<f64>) -> Self {
        Self {
            state,
            window: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    /// Uniform random control sequences.
    Random { samples: usize },
    /// Local minimization of the adc residual from random starts.
    Nlp { restarts: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySearch {
    pub method: SearchMethod,
    pub seed: u64,
    /// Random inputs are drawn from `[-input_scale, input_scale]`.
    pub input_scale: f64,
    pub solver: SolverOptions,
}

impl Default for VerifySearch {
    fn default() -> Self {
        Self {
            method: SearchMethod::Nlp { restarts: 50 },
            seed: 0,
            input_scale: 1.0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVerification {
    pub state_id: usize,
    pub state: Vec<f64>,
    pub verified: bool,
    /// Best adc residual found (≤ 0 when verified).
    pub residual: f64,
    /// Control sequence of `q + m` inputs, flattened.
    pub witness: Vec<f64>,
    /// `[V₀, V₁, …, Vₘ]` along the witness.
    pub v_path: Vec<f64>,
    /// `V(x⁰, w) ≥ α(x⁰, w)` at the sample.
    pub dominates_alpha: bool,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerificationReport {
    pub entries: Vec<StateVerification>,
}

impl VerificationReport {
    pub fn all_verified(&self) -> bool {
        self.entries.iter().all(|e| e.verified)
    }
}

/// adc residual and `[V₀ … Vₘ]` of a given control sequence.
pub fn evaluate_witness(
    model: &SystemModel,
    spec: &GdclfSpec,
    sample: &GdclfSample,
    witness: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let p = model.input_dim();
    check_dim("state", model.state_dim(), sample.state.len())?;
    check_dim("input window", spec.window() * p, sample.window.len())?;
    check_dim("witness", (spec.window() + spec.order()) * p, witness.len())?;
    let v0 = spec.v(&sample.state, &sample.window);
    let alpha0 = spec.alpha(&sample.state, &sample.window);
    let vseq = predicted_values(model, spec, &sample.state, witness);
    let residual = spec.adc_residual(v0, alpha0, &vseq);
    let mut path = Vec::with_capacity(vseq.len() + 1);
    path.push(v0);
    path.extend(vseq);
    Ok((residual, path))
}

/// Searches, for every sample, a control sequence of length `q + m`
/// satisfying the adc. Samples for which the budget runs out are reported
/// as unverified.
pub fn verify_gdclf_sample(
    model: &SystemModel,
    spec: &GdclfSpec,
    samples: &[GdclfSample],
    search: &VerifySearch,
) -> Result<VerificationReport> {
    let p = model.input_dim();
    let len = (spec.window() + spec.order()) * p;
    let mut entries = Vec::with_capacity(samples.len());
    for (state_id, sample) in samples.iter().enumerate() {
        check_dim("state", model.state_dim(), sample.state.len())?;
        check_dim("input window", spec.window() * p, sample.window.len())?;
        let v0 = spec.v(&sample.state, &sample.window);
        let alpha0 = spec.alpha(&sample.state, &sample.window);
        let mut rng = ChaCha8Rng::seed_from_u64(search.seed.wrapping_add(state_id as u64));
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len)
                .map(|_| rng.gen_range(-search.input_scale..=search.input_scale))
                .collect()
        };

        let mut best_residual = f64::INFINITY;
        let mut best = vec![0.0; len];
        let mut attempts = 0;
        let budget = match search.method {
            SearchMethod::Random { samples } => samples,
            SearchMethod::Nlp { restarts } => restarts,
        };
        while attempts < budget && best_residual > 0.0 {
            // The first attempt always starts from the zero sequence.
            let start = if attempts == 0 { vec![0.0; len] } else { draw(&mut rng) };
            attempts += 1;
            let candidate = match search.method {
                SearchMethod::Random { .. } => start,
                SearchMethod::Nlp { .. } => {
                    let model = model.smoothed(search.solver.smooth_abs_delta);
                    let spec = spec.clone();
                    let x0 = sample.state.clone();
                    let problem = FnProblem::unconstrained(len, move |z| {
                        let vseq = predicted_values(&model, &spec, &x0, z);
                        spec.adc_residual(v0, alpha0, &vseq)
                    });
                    match minimize(&problem, &start, &search.solver) {
                        Ok(r) => r.z_star,
                        Err(Error::InvalidStart(_)) | Err(Error::NonFiniteSample { .. }) => continue,
                        Err(e) => return Err(e),
                    }
                }
            };
            let vseq = predicted_values(model, spec, &sample.state, &candidate);
            let residual = spec.adc_residual(v0, alpha0, &vseq);
            if residual < best_residual {
                best_residual = residual;
                best = candidate;
            }
        }
        let (residual, v_path) = evaluate_witness(model, spec, sample, &best)?;
        entries.push(StateVerification {
            state_id,
            state: sample.state.clone(),
            verified: residual <= 0.0,
            residual,
            witness: best,
            v_path,
            dominates_alpha: v0 >= alpha0,
            attempts,
        });
    }
    Ok(VerificationReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::brockett_variant;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sigma_rules() {
        assert!(check_sigma(&case_study_weights(), 10));
        assert_abs_diff_eq!(case_study_weights().iter().sum::<f64>() / 10.0, 2.2, epsilon = 1e-15);
        assert!(check_sigma(&[1.0], 1));
        assert!(!check_sigma(&[0.5, 0.4], 2));
        assert!(!check_sigma(&[3.0, -1.0], 2));
        assert!(!check_sigma(&[1.0], 2));
        assert!(check_sigma(&finite_step_weights(4), 4));
    }

    #[test]
    fn residual_arithmetic() {
        let r = adc_residual(&[1.0, 1.0], 1.0, 0.1, &[1.5, 0.2]);
        assert_abs_diff_eq!(r, -0.05, epsilon = 1e-15);
        assert_eq!(adc_residual(&[1.0, 1.0], 0.0, 0.0, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn residual_matches_case_study_constraint() {
        let spec = GdclfSpec::squared_norm(case_study_weights(), 1e-5).unwrap();
        let x0 = [1.0, 2.0, 3.0, 5.0];
        let vseq: Vec<f64> = (1..=10).map(|i| 39.0 / i as f64).collect();
        let v0 = spec.v(&x0, &[]);
        let a0 = spec.alpha(&x0, &[]);
        assert_eq!(v0, 39.0);
        assert_abs_diff_eq!(a0, 1e-5 * 39.0 * 39.0, epsilon = 1e-15);
        let by_hand = 5.5 / 10.0 * (vseq[2] + vseq[3] + vseq[4] + vseq[5]) - v0 + 1e-5 * 39.0f64.powi(2);
        assert_abs_diff_eq!(spec.adc_residual(v0, a0, &vseq), by_hand, epsilon = 1e-12);
    }

    #[test]
    fn indices_and_selection() {
        assert_eq!(descent_indices(1.0, 0.1, &[1.5, 0.2], 0.0), vec![2]);
        assert_eq!(descent_indices(1.0, 0.0, &[1.0, 1.0], 0.0), vec![1, 2]);

        let vseq = [0.9, 0.3, 0.5];
        let g = select_index(1.0, 0.05, &vseq, DescentPolicy::GreatestDescent, 0.0).unwrap();
        assert_eq!(g.chosen, 2);
        assert_eq!(g.indices, vec![1, 2, 3]);
        assert_abs_diff_eq!(g.margin, 0.65, epsilon = 1e-15);
        let f = select_index(1.0, 0.05, &vseq, DescentPolicy::FirstDescent, 0.0).unwrap();
        assert_eq!(f.chosen, 1);
        let tie = select_index(1.0, 0.0, &[0.3, 0.3], DescentPolicy::GreatestDescent, 0.0).unwrap();
        assert_eq!(tie.chosen, 1);
    }

    #[test]
    fn no_descent_reports_best_margin() {
        let err = select_index(1.0, 0.1, &[1.2, 0.95], DescentPolicy::GreatestDescent, 0.0).unwrap_err();
        match err {
            Error::DescentNotFound { best_margin } => assert_abs_diff_eq!(best_margin, -0.05, epsilon = 1e-15),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tolerance_admits_boundary() {
        assert_eq!(descent_indices(1.0, 0.1, &[0.9 + 5e-9], DESCENT_TOL), vec![1]);
        assert!(descent_indices(1.0, 0.1, &[0.9 + 5e-8], DESCENT_TOL).is_empty());
    }

    #[test]
    fn spec_rejects_bad_weights() {
        assert!(GdclfSpec::squared_norm(vec![0.5, 0.4], 0.0).is_err());
        assert!(GdclfSpec::squared_norm(vec![], 0.0).is_err());
        assert!(GdclfSpec::squared_norm(vec![1.0], -1.0).is_err());
    }

    #[test]
    fn hand_witness_two_steps() {
        let model = brockett_variant();
        let spec = GdclfSpec::squared_norm(finite_step_weights(2), 1e-5).unwrap();
        let sample = GdclfSample::state_only(vec![0.0, 0.0, 0.0, 1.0]);
        let (residual, path) = evaluate_witness(&model, &spec, &sample, &[0.0, 5.0, 0.0, -5.0]).unwrap();
        assert_abs_diff_eq!(path[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(path[1], 1.46, epsilon = 1e-12);
        assert_abs_diff_eq!(path[2], 0.9216, epsilon = 1e-12);
        assert!(residual < 0.0);
    }

    #[test]
    fn verify_origin_and_unit_vector() {
        let model = brockett_variant();
        let spec = GdclfSpec::squared_norm(finite_step_weights(2), 1e-5).unwrap();
        let samples = vec![
            GdclfSample::state_only(vec![0.0; 4]),
            GdclfSample::state_only(vec![0.0, 0.0, 0.0, 1.0]),
        ];
        let report = verify_gdclf_sample(&model, &spec, &samples, &VerifySearch::default()).unwrap();
        assert!(report.all_verified());
        assert_eq!(report.entries[0].witness, vec![0.0; 4]);
        assert_eq!(report.entries[0].attempts, 1);
        assert!(report.entries[1].residual <= 0.0);
        assert!(report.entries[1].v_path[2] < 1.0);
    }

    #[test]
    fn verify_needs_windows_for_nonzero_q() {
        let model = brockett_variant();
        let spec = GdclfSpec::new(
            1,
            1,
            vec![1.0],
            Arc::new(|x, w| squared_norm(x) + squared_norm(w)),
            Arc::new(|_, _| 0.0),
        )
        .unwrap();
        let samples = vec![GdclfSample::state_only(vec![1.0; 4])];
        assert!(verify_gdclf_sample(&model, &spec, &samples, &VerifySearch::default()).is_err());
    }
}
