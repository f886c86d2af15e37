//! Pinned closed-loop behaviour of the case study.

use flexmpc::io::{read_actual_csv, write_actual_csv};
use flexmpc::mpc::{check_subsequence_decrease, flexible_step_run, replay_states, FlexStepConfig};
use flexmpc::nlp::SolverOptions;
use flexmpc::ocp::{case_study_spec, CASE_STUDY_X0};

fn config() -> FlexStepConfig {
    FlexStepConfig {
        initial_guess: Some(vec![1.0; 20]),
        ..FlexStepConfig::default()
    }
}

#[test]
fn implemented_steps_are_pinned() {
    let spec = case_study_spec();
    let trace = flexible_step_run(&spec, &CASE_STUDY_X0, &config(), &SolverOptions::default()).unwrap();
    assert_eq!(
        trace.implemented_steps(),
        [6, 9, 6, 4, 5, 3, 3, 2, 2, 2, 2, 3, 2, 2, 3, 3, 3]
    );
    assert_eq!(trace.final_k(), 60);
    assert!(check_subsequence_decrease(&trace, 1e-6).is_ok());
}

#[test]
fn cold_start_agrees_on_the_first_instances() {
    let spec = case_study_spec();
    let opts = SolverOptions::default();
    let warm = flexible_step_run(&spec, &CASE_STUDY_X0, &config(), &opts).unwrap();
    let cold_cfg = FlexStepConfig {
        cold_start: true,
        ..config()
    };
    let cold = flexible_step_run(&spec, &CASE_STUDY_X0, &cold_cfg, &opts).unwrap();
    assert_eq!(&warm.implemented_steps()[..2], &cold.implemented_steps()[..2]);
}

#[test]
fn replay_reproduces_the_recorded_states() {
    let spec = case_study_spec();
    let trace = flexible_step_run(&spec, &CASE_STUDY_X0, &config(), &SolverOptions::default()).unwrap();
    let replayed = replay_states(&spec.model, &trace).unwrap();
    assert_eq!(replayed, trace.states());

    let mut buf = Vec::new();
    write_actual_csv(&trace, &mut buf).unwrap();
    let rows = read_actual_csv(buf.as_slice()).unwrap();
    assert_eq!(rows.rows.len(), trace.final_k() + 1);
    assert_eq!(rows.rows.last().unwrap().x, trace.final_state);
}
