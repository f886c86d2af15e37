//! Scenario execution and artifact emission.
//!
//! Every closed-loop run gets its own directory holding
//!
//! * `actual.csv`, `instances.csv`, `predictions.csv` (column orders in
//!   [`flexmpc::io`]);
//! * `total_cost.csv`: `k, total_cost`, the running sum of stage costs;
//! * `summary.json`: a [`RunSummary`];
//! * optionally `states.svg`, `total_cost.svg` and, for flexible-step runs,
//!   `lyapunov.svg` and `steps.svg`, all rendered from the CSV files alone.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use flexmpc::io::{
    read_actual_csv, read_instances_csv, read_predictions_csv, write_actual_csv, write_instances_csv,
    write_predictions_csv, write_verification_csv,
};
use flexmpc::lyapunov::{verify_gdclf_sample, GdclfSample, VerifySearch};
use flexmpc::model::{brockett_residual_probe, BoxSet};
use flexmpc::mpc::{inf_norm, total_cost_series};
use flexmpc::{flexible_step_run, standard_run, MpcTrace, RunAbort};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compare::{compare, load_trace, write_comparison};
use crate::config::{ExperimentConfig, Scenario};
use crate::error::{CliError, Result};
use crate::plot::{Plot, Series, Style};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub state_weight: f64,
    pub input_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// `flex-step` or `standard`.
    pub scheme: String,
    pub gamma: Option<f64>,
    /// `completed` or `aborted`.
    pub status: String,
    pub error: Option<String>,
    pub final_k: usize,
    pub instances: usize,
    pub stop_radius: f64,
    /// Whether some `‖x(k)‖∞ ≤ stop_radius`.
    pub converged: bool,
    pub convergence_step: Option<usize>,
    pub total_cost_end: f64,
    pub final_state_inf_norm: f64,
    /// Implemented steps per instance → number of instances.
    pub steps_histogram: BTreeMap<usize, usize>,
    pub stage_cost: StageWeights,
}

impl RunSummary {
    pub fn aborted(&self) -> bool {
        self.status == "aborted"
    }
}

/// What a finished experiment reports back to the caller.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub lines: Vec<String>,
    /// Some closed-loop run stopped early.
    pub aborted: bool,
}

pub fn run_experiment(cfg: &ExperimentConfig, svg: bool) -> Result<Outcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.emit() + "\n")?;
    match cfg.scenario {
        Scenario::Problem3 => run_flexstep_only(cfg, out, svg),
        Scenario::Problem4 | Scenario::Custom => run_sweep(cfg, out, svg),
        Scenario::GdclfVerify => run_verify(cfg, out),
        Scenario::BrockettProbe => run_probe(cfg, out),
    }
}

fn weights(cfg: &ExperimentConfig) -> StageWeights {
    StageWeights {
        state_weight: cfg.ocp.state_weight,
        input_weight: cfg.ocp.input_weight,
    }
}

fn describe(label: &str, s: &RunSummary) -> String {
    let conv = match s.convergence_step {
        Some(k) => format!("converged at k={k}"),
        None => "not converged".into(),
    };
    let mut line = format!(
        "{label}: {} after {} steps / {} instances, {conv}, total cost {:.6}, final |x|inf {:.3e}",
        s.status, s.final_k, s.instances, s.total_cost_end, s.final_state_inf_norm
    );
    if let Some(e) = &s.error {
        line.push_str(&format!(" ({e})"));
    }
    line
}

fn run_flexstep(cfg: &ExperimentConfig, dir: &Path, svg: bool) -> Result<RunSummary> {
    let spec = cfg.ocp_spec()?;
    let result = flexible_step_run(&spec, &cfg.run.x0, &cfg.flexstep_config(), &cfg.solver);
    emit_run(result, dir, weights(cfg), cfg.run.stop_radius, svg)
}

fn run_standard(cfg: &ExperimentConfig, gamma: f64, dir: &Path, svg: bool) -> Result<RunSummary> {
    let spec = cfg.ocp_spec()?;
    let guess = cfg.standard_guess();
    let result = standard_run(
        &spec,
        &cfg.run.x0,
        gamma,
        cfg.run.steps_per_instance,
        cfg.run.max_steps,
        guess.as_deref(),
        &cfg.solver,
    );
    emit_run(result, dir, weights(cfg), cfg.run.stop_radius, svg)
}

fn run_flexstep_only(cfg: &ExperimentConfig, out: &Path, svg: bool) -> Result<Outcome> {
    let summary = run_flexstep(cfg, out, svg)?;
    Ok(Outcome {
        lines: vec![describe("flex-step", &summary)],
        aborted: summary.aborted(),
    })
}

pub fn gamma_label(gamma: f64) -> String {
    format!("gamma-{gamma}")
}

/// Standard runs for every γ in parallel, plus a flexible-step run for the
/// custom scenario, then a total-cost comparison across all of them.
fn run_sweep(cfg: &ExperimentConfig, out: &Path, svg: bool) -> Result<Outcome> {
    let mut jobs: Vec<(String, Option<f64>)> = Vec::new();
    if cfg.scenario == Scenario::Custom {
        jobs.push(("flex-step".into(), None));
    }
    jobs.extend(cfg.run.gammas.iter().map(|g| (gamma_label(*g), Some(*g))));

    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(label, gamma)| {
                let dir = out.join(label);
                scope.spawn(move || match gamma {
                    Some(g) => run_standard(cfg, *g, &dir, svg),
                    None => run_flexstep(cfg, &dir, svg),
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::Runtime("worker thread panicked".into())))
            })
            .collect()
    });

    let mut runs = Vec::new();
    let mut lines = Vec::new();
    let mut aborted = false;
    for ((label, _), result) in jobs.iter().zip(results) {
        let summary = result?;
        aborted |= summary.aborted();
        lines.push(describe(label, &summary));
        runs.push(serde_json::json!({ "label": label, "summary": summary }));
    }
    let doc = serde_json::json!({ "scenario": cfg.scenario, "runs": runs });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;

    if jobs.len() > 1 {
        let traces = jobs
            .iter()
            .map(|(label, _)| load_trace(&out.join(label)))
            .collect::<Result<Vec<_>>>()?;
        let cmp = compare(&traces)?;
        write_comparison(&cmp, out, svg)?;
        lines.push(format!(
            "comparison written to {}",
            out.join("comparison.csv").display()
        ));
    }
    Ok(Outcome { lines, aborted })
}

/// Writes the bundle of one closed-loop run; aborted runs are flushed too.
fn emit_run(
    result: std::result::Result<MpcTrace, RunAbort>,
    dir: &Path,
    weights: StageWeights,
    stop_radius: f64,
    svg: bool,
) -> Result<RunSummary> {
    let (trace, error) = match result {
        Ok(t) => (t, None),
        Err(a) => (*a.trace, Some(a.error.to_string())),
    };
    fs::create_dir_all(dir)?;
    write_actual_csv(&trace, writer(&dir.join("actual.csv"))?)?;
    write_instances_csv(&trace, writer(&dir.join("instances.csv"))?)?;
    write_predictions_csv(&trace, writer(&dir.join("predictions.csv"))?)?;
    let series = total_cost_series(&trace);
    let mut tc = String::from("k,total_cost\n");
    for (i, c) in series.iter().enumerate() {
        tc.push_str(&format!("{},{c}\n", trace.k0 + i));
    }
    fs::write(dir.join("total_cost.csv"), tc)?;

    let mut steps_histogram = BTreeMap::new();
    for l in trace.implemented_steps() {
        *steps_histogram.entry(l).or_insert(0) += 1;
    }
    let (scheme, gamma) = match trace.scheme {
        flexmpc::mpc::Scheme::FlexStep => ("flex-step", None),
        flexmpc::mpc::Scheme::Standard { gamma } => ("standard", Some(gamma)),
    };
    let convergence_step = trace.convergence_step(stop_radius);
    let summary = RunSummary {
        scheme: scheme.into(),
        gamma,
        status: if error.is_some() { "aborted" } else { "completed" }.into(),
        error,
        final_k: trace.final_k(),
        instances: trace.instances.len(),
        stop_radius,
        converged: convergence_step.is_some(),
        convergence_step,
        total_cost_end: *series.last().unwrap_or(&0.0),
        final_state_inf_norm: inf_norm(&trace.final_state),
        steps_histogram,
        stage_cost: weights,
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if svg {
        render_run_plots(dir)?;
    }
    Ok(summary)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_csv_file(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Renders the plots of a run directory from its CSV files.
pub fn render_run_plots(dir: &Path) -> Result<()> {
    let actual = read_actual_csv(read_csv_file(&dir.join("actual.csv"))?)?;
    let mut states = Plot::new("Closed-loop states", "k", "x");
    for i in 0..actual.state_dim {
        let pts = actual.rows.iter().map(|r| (r.k as f64, r.x[i])).collect();
        states.series.push(Series::line(format!("x{}", i + 1), pts));
    }
    fs::write(dir.join("states.svg"), states.render())?;

    let cost = crate::compare::read_total_cost(&dir.join("total_cost.csv"))?;
    let mut plot = Plot::new("Total cost", "k", "sum of stage costs");
    plot.series.push(Series::line(
        "total cost",
        cost.iter().map(|(k, c)| (*k as f64, *c)).collect(),
    ));
    fs::write(dir.join("total_cost.svg"), plot.render())?;

    let instances = read_instances_csv(read_csv_file(&dir.join("instances.csv"))?)?;
    if instances.is_empty() || instances.iter().any(|i| i.adc_residual.is_none()) {
        return Ok(());
    }
    let mut steps = Plot::new("Implemented steps per instance", "instance", "steps");
    steps.series.push(Series {
        name: String::new(),
        points: instances
            .iter()
            .map(|i| (i.instance_id as f64, i.l_decr as f64))
            .collect(),
        style: Style::Markers,
        color: None,
    });
    fs::write(dir.join("steps.svg"), steps.render())?;

    let predictions = read_predictions_csv(read_csv_file(&dir.join("predictions.csv"))?)?;
    let mut lyap = Plot::new("Predicted Lyapunov values per instance", "k", "V");
    lyap.log_y = true;
    let mut first = true;
    for inst in &instances {
        let rows: Vec<_> = predictions
            .iter()
            .filter(|r| r.instance_id == inst.instance_id)
            .collect();
        let kept: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.role != "discarded")
            .map(|r| (r.k as f64, r.v))
            .collect();
        // The discarded tail starts at the chosen point so the two pieces join.
        let tail: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.role == "chosen" || r.role == "discarded")
            .map(|r| (r.k as f64, r.v))
            .collect();
        let name = |s: &str| if first { s.to_string() } else { String::new() };
        lyap.series.push(Series {
            name: name("implemented"),
            points: kept,
            style: Style::Markers,
            color: Some("#1f77b4"),
        });
        lyap.series.push(Series {
            name: name("discarded"),
            points: tail,
            style: Style::Dashed,
            color: Some("#aaaaaa"),
        });
        first = false;
    }
    fs::write(dir.join("lyapunov.svg"), lyap.render())?;
    Ok(())
}

fn sample_states(seed: u64, count: usize, range: f64, dim: usize) -> Vec<GdclfSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| GdclfSample::state_only((0..dim).map(|_| rng.gen_range(-range..range)).collect()))
        .collect()
}

/// One verification per seed, in parallel, each into `seed-<n>/`.
fn run_verify(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let spec = cfg.gdclf()?;
    let model = cfg.ocp_spec()?.model;
    let v = &cfg.verify;
    let results: Vec<Result<(u64, PathBuf, flexmpc::lyapunov::VerificationReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = v
            .seeds
            .iter()
            .map(|&seed| {
                let (spec, model) = (&spec, &model);
                scope.spawn(move || {
                    let samples = sample_states(seed, v.samples, v.state_range, model.state_dim());
                    let search = VerifySearch {
                        method: v.method,
                        seed,
                        input_scale: v.input_scale,
                        solver: cfg.solver.clone(),
                    };
                    let report = verify_gdclf_sample(model, spec, &samples, &search)?;
                    let dir = out.join(format!("seed-{seed}"));
                    fs::create_dir_all(&dir)?;
                    write_verification_csv(&report, writer(&dir.join("verification.csv"))?)?;
                    Ok((seed, dir, report))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::Runtime("worker thread panicked".into())))
            })
            .collect()
    });

    let mut lines = Vec::new();
    let mut seeds = Vec::new();
    for r in results {
        let (seed, dir, report) = r?;
        let verified = report.entries.iter().filter(|e| e.verified).count();
        lines.push(format!(
            "seed {seed}: {verified}/{} states verified ({})",
            report.entries.len(),
            dir.join("verification.csv").display()
        ));
        seeds.push(serde_json::json!({
            "seed": seed,
            "all_verified": report.all_verified(),
            "verified": verified,
            "residuals": report.entries.iter().map(|e| e.residual).collect::<Vec<_>>(),
            "states": report.entries.iter().map(|e| e.state.clone()).collect::<Vec<_>>(),
        }));
    }
    let doc = serde_json::json!({ "scenario": cfg.scenario, "seeds": seeds });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(Outcome { lines, aborted: false })
}

fn run_probe(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let p = &cfg.probe;
    let domain = BoxSet::symmetric(6, p.radius)?;
    let report = brockett_residual_probe(p.y4, &domain, p.grid, p.refine)?;
    let mut csv = String::from("y4,grid_residual,residual,x1,x2,x3,x4,u1,u2\n");
    let cells: Vec<String> = [p.y4, report.grid_residual, report.residual]
        .iter()
        .chain(&report.argmin)
        .map(|v| v.to_string())
        .collect();
    csv.push_str(&cells.join(","));
    csv.push('\n');
    fs::write(out.join("probe.csv"), csv)?;
    let doc = serde_json::json!({
        "scenario": cfg.scenario,
        "y4": p.y4,
        "grid_residual": report.grid_residual,
        "min_residual": report.residual,
        "positive": report.residual > 0.0,
        "argmin": report.argmin,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(Outcome {
        lines: vec![format!(
            "probe y4={}: grid minimum {:.6}, refined minimum {:.6}",
            p.y4, report.grid_residual, report.residual
        )],
        aborted: false,
    })
}
