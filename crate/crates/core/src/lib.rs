//! Flexible-step model predictive control.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: discrete-time systems, rollouts and the Brockett-integrator variant;
//! * [`lyapunov`]: generalized control Lyapunov functions, the average decrease
//!   constraint and descent-index selection;
//! * [`nlp`]: augmented-Lagrangian / L-BFGS minimizer with finite-difference gradients;
//! * [`ocp`]: single-shooting transcription of the finite-horizon problems;
//! * [`mpc`]: flexible-step and standard closed loops with full traces;
//! * [`io`]: CSV serialization.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod lyapunov;
pub mod model;
pub mod mpc;
pub mod nlp;
pub mod ocp;

pub use error::{Error, Result};
pub use lyapunov::{DescentPolicy, GdclfSpec};
pub use model::{brockett_variant, BoxSet, SystemModel};
pub use mpc::{flexible_step_run, standard_run, FlexStepConfig, MpcTrace, RunAbort};
pub use nlp::{minimize, NlpResult, SolveStatus, SolverOptions};
pub use ocp::{build_flexstep_nlp, build_standard_nlp, OcpSpec, StageCost, TerminalCost};
