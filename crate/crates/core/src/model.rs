//! Discrete-time control systems `x⁺ = f(x, u)`.
//!
//! A [`SystemModel`] wraps a [`Dynamics`] implementation together with its
//! dimensions and sampling time. The Brockett-integrator variant with an
//! `|x₄|` drift term is shipped as [`brockett_variant`], along with the
//! `φ(x, u) = f(x, u) − x` map used to probe Brockett's necessary condition.

use std::fmt;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};

/// One-step transition map of a discrete-time system.
pub trait Dynamics: Send + Sync {
    /// Writes `f(x, u)` into `next`. Dimensions are checked by the caller.
    fn step_into(&self, x: &[f64], u: &[f64], next: &mut [f64]);

    /// A copy of these dynamics with nonsmooth terms softened by `delta`.
    ///
    /// Only used inside optimization instances; closed-loop simulation
    /// always goes through the exact map.
    fn smoothed(&self, _delta: f64) -> Option<Arc<dyn Dynamics>> {
        None
    }
}

impl<F> Dynamics for F
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn step_into(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        self(x, u, next)
    }
}

/// A discrete-time control system with state dimension `n`, input
/// dimension `p` and sampling time `h`.
#[derive(Clone)]
pub struct SystemModel {
    n: usize,
    p: usize,
    h: f64,
    dynamics: Arc<dyn Dynamics>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("n", &self.n)
            .field("p", &self.p)
            .field("h", &self.h)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn new(n: usize, p: usize, h: f64, dynamics: Arc<dyn Dynamics>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::ContractViolation(
                "state and input dimensions must be positive".into(),
            ));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::ContractViolation(format!(
                "sampling time must be positive, got {h}"
            )));
        }
        Ok(Self { n, p, h, dynamics })
    }

    /// Builds a model from a closure `(x, u, next)`.
    pub fn from_fn<F>(n: usize, p: usize, h: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(n, p, h, Arc::new(f))
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.p
    }

    pub fn sampling_time(&self) -> f64 {
        self.h
    }

    /// `f(x, u)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", self.n, x.len())?;
        check_dim("input", self.p, u.len())?;
        let mut next = vec![0.0; self.n];
        self.dynamics.step_into(x, u, &mut next);
        Ok(next)
    }

    /// Simulates `useq` from `x0`; returns `N + 1` states starting at `x0`.
    pub fn rollout(&self, x0: &[f64], useq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        check_dim("initial state", self.n, x0.len())?;
        for u in useq {
            check_dim("input", self.p, u.len())?;
        }
        let mut states = Vec::with_capacity(useq.len() + 1);
        states.push(x0.to_vec());
        for u in useq {
            let mut next = vec![0.0; self.n];
            self.dynamics.step_into(states.last().expect("nonempty"), u, &mut next);
            states.push(next);
        }
        Ok(states)
    }

    /// Rollout over a flat input vector `[u⁰ u¹ …]` of `steps · p` entries.
    ///
    /// Returns the states flattened the same way, `(steps + 1) · n` entries.
    pub fn rollout_flat(&self, x0: &[f64], inputs: &[f64], steps: usize) -> Vec<f64> {
        debug_assert!(inputs.len() >= steps * self.p);
        let n = self.n;
        let mut states = vec![0.0; (steps + 1) * n];
        states[..n].copy_from_slice(x0);
        for j in 0..steps {
            let (head, tail) = states.split_at_mut((j + 1) * n);
            self.dynamics
                .step_into(&head[j * n..], &inputs[j * self.p..(j + 1) * self.p], &mut tail[..n]);
        }
        states
    }

    /// Variant used inside optimization instances when `delta > 0`.
    ///
    /// Models without nonsmooth terms return themselves.
    pub fn smoothed(&self, delta: f64) -> SystemModel {
        if delta <= 0.0 {
            return self.clone();
        }
        match self.dynamics.smoothed(delta) {
            Some(dynamics) => SystemModel {
                dynamics,
                ..self.clone()
            },
            None => self.clone(),
        }
    }
}

/// Axis-aligned box `{ z : lower ≤ z ≤ upper }` with optional infinite bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box upper bound", lower.len(), upper.len())?;
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::ContractViolation(format!(
                    "box coordinate {i}: lower {lo} exceeds upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `ℝᵈ`.
    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    /// `[-r, r]ᵈ`.
    pub fn symmetric(dim: usize, radius: f64) -> Result<Self> {
        Self::new(vec![-radius; dim], vec![radius; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|l| *l == f64::NEG_INFINITY) && self.upper.iter().all(|u| *u == f64::INFINITY)
    }

    /// True when the origin lies in the interior of the box.
    pub fn origin_is_interior(&self) -> bool {
        self.lower.iter().all(|l| *l < 0.0) && self.upper.iter().all(|u| *u > 0.0)
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && z.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Number of finite bounds, i.e. inequality residuals the box produces.
    pub fn finite_bound_count(&self) -> usize {
        self.lower.iter().filter(|l| l.is_finite()).count() + self.upper.iter().filter(|u| u.is_finite()).count()
    }

    /// Appends `lower − z` and `z − upper` for every finite bound.
    pub fn push_residuals(&self, z: &[f64], out: &mut Vec<f64>) {
        for ((v, lo), hi) in z.iter().zip(&self.lower).zip(&self.upper) {
            if lo.is_finite() {
                out.push(lo - v);
            }
            if hi.is_finite() {
                out.push(v - hi);
            }
        }
    }
}

/// Sampling time of the shipped Brockett variant.
pub const BROCKETT_H: f64 = 0.1;

/// Brockett-integrator variant
/// `x⁺ = x + h·[1, 0, −x₂, x₃]ᵀu₁ + h·[0, 1, x₁, x₂]ᵀu₂ + h·[0, 0, 0, |x₄|]ᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct BrockettVariant {
    pub h: f64,
    /// When positive, `|s|` is replaced by `sqrt(s² + δ²)`.
    pub abs_delta: f64,
}

impl BrockettVariant {
    fn abs(&self, s: f64) -> f64 {
        if self.abs_delta > 0.0 {
            (s * s + self.abs_delta * self.abs_delta).sqrt()
        } else {
            s.abs()
        }
    }
}

impl Dynamics for BrockettVariant {
    fn step_into(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        let h = self.h;
        let (u1, u2) = (u[0], u[1]);
        next[0] = x[0] + h * u1;
        next[1] = x[1] + h * u2;
        next[2] = x[2] + h * (-x[1] * u1 + x[0] * u2);
        next[3] = x[3] + h * (x[2] * u1 + x[1] * u2 + self.abs(x[3]));
    }

    fn smoothed(&self, delta: f64) -> Option<Arc<dyn Dynamics>> {
        Some(Arc::new(BrockettVariant {
            h: self.h,
            abs_delta: delta,
        }))
    }
}

/// The 4-state, 2-input Brockett variant with `h = 0.1`.
pub fn brockett_variant() -> SystemModel {
    brockett_variant_with_h(BROCKETT_H)
}

pub fn brockett_variant_with_h(h: f64) -> SystemModel {
    SystemModel {
        n: 4,
        p: 2,
        h,
        dynamics: Arc::new(BrockettVariant { h, abs_delta: 0.0 }),
    }
}

/// `φ(x, u) = f(x, u) − x` for the Brockett variant with `h = 0.1`.
pub fn brockett_phi(x: &[f64], u: &[f64]) -> Result<[f64; 4]> {
    check_dim("state", 4, x.len())?;
    check_dim("input", 2, u.len())?;
    Ok(phi_unchecked(BROCKETT_H, x, u))
}

fn phi_unchecked(h: f64, x: &[f64], u: &[f64]) -> [f64; 4] {
    [
        h * u[0],
        h * u[1],
        h * (-x[1] * u[0] + x[0] * u[1]),
        h * (x[2] * u[0] + x[1] * u[1] + x[3].abs()),
    ]
}

/// `‖φ(x, u) − [0, 0, 0, −y₄]‖` over the stacked point `z = (x, u)`.
pub fn brockett_residual(y4: f64, z: &[f64]) -> f64 {
    let phi = phi_unchecked(BROCKETT_H, &z[..4], &z[4..6]);
    let r3 = phi[3] + y4;
    (phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2] + r3 * r3).sqrt()
}

/// Outcome of [`brockett_residual_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub y4: f64,
    /// Minimum over the grid before refinement.
    pub grid_residual: f64,
    /// Minimum after coordinate-descent refinement.
    pub residual: f64,
    /// Stacked `(x, u)` attaining `residual`.
    pub argmin: Vec<f64>,
    pub grid_points_per_dim: usize,
    pub refine_iterations: usize,
}

/// Searches a box over `(x, u)` for the smallest residual of
/// `φ(x, u) = [0, 0, 0, −y₄]`.
///
/// A strictly positive result shows numerically that the equation has no
/// solution in the box, i.e. Brockett's necessary condition fails.
pub fn brockett_residual_probe(
    y4: f64,
    domain: &BoxSet,
    grid_points_per_dim: usize,
    refine: usize,
) -> Result<ProbeReport> {
    check_dim("probe box", 6, domain.dim())?;
    if !(y4.is_finite() && y4 >= 0.0) {
        return Err(Error::ContractViolation(format!(
            "probe target y4 must be non-negative, got {y4}"
        )));
    }
    let lo = domain.lower();
    let hi = domain.upper();
    if lo.iter().chain(hi).any(|b| !b.is_finite()) {
        return Err(Error::ContractViolation("probe box must be compact".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| l >= h) {
        return Err(Error::ContractViolation("probe box is degenerate".into()));
    }
    if grid_points_per_dim < 2 {
        return Err(Error::ContractViolation(
            "probe grid needs at least 2 points per dimension".into(),
        ));
    }

    let g = grid_points_per_dim;
    let axes: Vec<Vec<f64>> = (0..6)
        .map(|d| {
            (0..g)
                .map(|i| lo[d] + (hi[d] - lo[d]) * i as f64 / (g - 1) as f64)
                .collect()
        })
        .collect();

    let mut best = f64::INFINITY;
    let mut best_z = vec![0.0; 6];
    let mut z = [0.0; 6];
    let total = g.pow(6);
    for idx in 0..total {
        let mut rem = idx;
        for d in (0..6).rev() {
            z[d] = axes[d][rem % g];
            rem /= g;
        }
        let r = brockett_residual(y4, &z);
        if r < best {
            best = r;
            best_z.copy_from_slice(&z);
        }
    }
    let grid_residual = best;

    // Coordinate descent with step halving, started at the grid minimizer.
    let mut steps: Vec<f64> = (0..6).map(|d| (hi[d] - lo[d]) / (g - 1) as f64).collect();
    let mut iterations = 0;
    while iterations < refine {
        iterations += 1;
        let mut improved = false;
        for d in 0..6 {
            for dir in [1.0, -1.0] {
                let mut trial = best_z.clone();
                trial[d] = (trial[d] + dir * steps[d]).clamp(lo[d], hi[d]);
                let r = brockett_residual(y4, &trial);
                if r < best {
                    best = r;
                    best_z = trial;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
            if steps.iter().all(|s| *s < 1e-15) {
                break;
            }
        }
    }

    Ok(ProbeReport {
        y4,
        grid_residual,
        residual: best,
        argmin: best_z,
        grid_points_per_dim: g,
        refine_iterations: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn brockett_hand_steps() {
        let model = brockett_variant();
        let x1 = model.step(&[0.0, 0.0, 0.0, 1.0], &[0.0, 5.0]).unwrap();
        assert_eq!(x1, vec![0.0, 0.5, 0.0, 1.1]);
        let x2 = model.step(&x1, &[0.0, -5.0]).unwrap();
        for (a, b) in x2.iter().zip([0.0, 0.0, 0.0, 0.96]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn drift_only() {
        let model = brockett_variant();
        let next = model.step(&[1.0, 2.0, 3.0, 5.0], &[0.0, 0.0]).unwrap();
        assert_eq!(next, vec![1.0, 2.0, 3.0, 5.5]);
    }

    #[test]
    fn inputs_at_origin() {
        let model = brockett_variant();
        let next = model.step(&[0.0; 4], &[2.0, -3.0]).unwrap();
        assert_eq!(next, vec![0.1 * 2.0, 0.1 * -3.0, 0.0, 0.0]);
        assert_eq!(model.step(&[0.0; 4], &[0.0; 2]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn step_rejects_bad_dims() {
        let model = brockett_variant();
        assert!(matches!(
            model.step(&[0.0; 3], &[0.0; 2]),
            Err(Error::DimensionMismatch { what: "state", .. })
        ));
        assert!(matches!(
            model.step(&[0.0; 4], &[0.0; 1]),
            Err(Error::DimensionMismatch { what: "input", .. })
        ));
        assert!(model.rollout(&[0.0; 4], &[vec![0.0; 3]]).is_err());
    }

    #[test]
    fn rollout_two_steps() {
        let model = brockett_variant();
        let xs = model
            .rollout(&[0.0, 0.0, 0.0, 1.0], &[vec![0.0, 5.0], vec![0.0, -5.0]])
            .unwrap();
        assert_eq!(xs.len(), 3);
        assert_eq!(xs[1], vec![0.0, 0.5, 0.0, 1.1]);
        assert_abs_diff_eq!(xs[2][3], 0.96, epsilon = 1e-15);
        assert_eq!(model.rollout(&[1.0; 4], &[]).unwrap(), vec![vec![1.0; 4]]);
    }

    #[test]
    fn rollout_flat_matches_rollout() {
        let model = brockett_variant();
        let useq = vec![vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]];
        let flat: Vec<f64> = useq.iter().flatten().copied().collect();
        let xs = model.rollout(&[0.2, -0.4, 1.0, 0.5], &useq).unwrap();
        let xf = model.rollout_flat(&[0.2, -0.4, 1.0, 0.5], &flat, 3);
        assert_eq!(xs.concat(), xf);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(brockett_phi(&[0.0; 4], &[0.0; 2]).unwrap(), [0.0; 4]);
        let phi = brockett_phi(&[0.0, 0.0, 0.0, 1.0], &[0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(phi[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(phi[3], 0.1, epsilon = 1e-15);
        assert_eq!(phi[0], 0.0);
        assert_eq!(phi[2], 0.0);
        assert_eq!(
            brockett_phi(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0]).unwrap(),
            [0.1, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn smoothing_softens_abs_only() {
        let model = brockett_variant();
        let smooth = model.smoothed(1e-3);
        let x = [0.3, -0.2, 0.5, 0.0];
        let u = [0.4, 0.1];
        let a = model.step(&x, &u).unwrap();
        let b = smooth.step(&x, &u).unwrap();
        assert_eq!(a[..3], b[..3]);
        assert_abs_diff_eq!(b[3] - a[3], 0.1 * 1e-3, epsilon = 1e-15);
        // δ = 0 leaves the exact map.
        assert_eq!(model.smoothed(0.0).step(&x, &u).unwrap(), a);
    }

    #[test]
    fn box_set_rules() {
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxSet::new(vec![0.0, 1.0], vec![1.0]).is_err());
        let b = BoxSet::new(vec![-1.0, f64::NEG_INFINITY], vec![2.0, 3.0]).unwrap();
        assert_eq!(b.finite_bound_count(), 3);
        assert!(b.origin_is_interior());
        assert!(b.contains(&[0.0, -1e9]));
        assert!(!b.contains(&[2.5, 0.0]));
        let mut r = Vec::new();
        b.push_residuals(&[0.5, 4.0], &mut r);
        assert_eq!(r, vec![-1.5, -1.5, 1.0]);
        assert!(BoxSet::unbounded(3).is_unbounded());
        assert!(!BoxSet::new(vec![0.0], vec![1.0]).unwrap().origin_is_interior());
    }

    #[test]
    fn probe_origin_and_trivial_target() {
        assert_eq!(brockett_residual(0.01, &[0.0; 6]), 0.01);
        let domain = BoxSet::symmetric(6, 1.0).unwrap();
        let report = brockett_residual_probe(0.0, &domain, 3, 10).unwrap();
        assert_eq!(report.residual, 0.0);
    }

    #[test]
    fn probe_rejects_bad_boxes() {
        let degenerate = BoxSet::new(vec![0.0; 6], vec![0.0; 6]).unwrap();
        assert!(brockett_residual_probe(0.01, &degenerate, 5, 10).is_err());
        assert!(brockett_residual_probe(0.01, &BoxSet::unbounded(6), 5, 10).is_err());
        assert!(brockett_residual_probe(0.01, &BoxSet::symmetric(5, 1.0).unwrap(), 5, 10).is_err());
        assert!(brockett_residual_probe(-1.0, &BoxSet::symmetric(6, 1.0).unwrap(), 5, 10).is_err());
    }

    #[test]
    fn probe_small_grid_is_positive() {
        let domain = BoxSet::symmetric(6, 1.0).unwrap();
        let report = brockett_residual_probe(0.01, &domain, 5, 200).unwrap();
        assert!(report.residual > 0.0);
        assert!(report.residual <= report.grid_residual);
        assert_eq!(brockett_residual(0.01, &report.argmin), report.residual);
    }
}
