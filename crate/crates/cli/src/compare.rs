//! Side-by-side total-cost comparison of finished runs.
//!
//! Outputs:
//!
//! * `comparison.csv`: `k` followed by one total-cost column per trace; cells
//!   past the end of a shorter trace are empty;
//! * `comparison_summary.csv`: `label, final_k, total_cost_end,
//!   end_state_inf_norm, tail_increment_50`;
//! * optionally `comparison.svg`.

use std::fs;
use std::path::{Path, PathBuf};

use flexmpc::io::read_actual_csv;
use flexmpc::mpc::inf_norm;

use crate::error::{CliError, Result};
use crate::experiment::{RunSummary, StageWeights};
use crate::plot::{Plot, Series};

/// Steps over which the tail increment of the total cost is measured.
pub const TAIL: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub label: String,
    pub weights: StageWeights,
    /// `(k, Σ_{j<k} f0)`.
    pub total_cost: Vec<(usize, f64)>,
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub final_k: usize,
    pub total_cost_end: f64,
    pub end_state_inf_norm: f64,
    /// Total-cost increase over the last [`TAIL`] steps (whole run if shorter).
    pub tail_increment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub traces: Vec<LoadedTrace>,
    pub rows: Vec<ComparisonRow>,
}

fn run_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

pub fn read_total_cost(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("k,total_cost") {
        return Err(CliError::Runtime(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let parsed = line
                .split_once(',')
                .and_then(|(k, c)| Some((k.parse().ok()?, c.parse().ok()?)));
            parsed.ok_or_else(|| CliError::Runtime(format!("{}: line {}: malformed row", path.display(), i + 2)))
        })
        .collect()
}

/// Loads a run directory (or the `actual.csv` inside one). The total cost is
/// recomputed from the implemented states and inputs with the stage-cost
/// weights recorded in `summary.json`.
pub fn load_trace(path: &Path) -> Result<LoadedTrace> {
    let dir = run_dir(path);
    let summary_path = dir.join("summary.json");
    let summary: RunSummary = fs::read_to_string(&summary_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", summary_path.display())))
        .and_then(|t| {
            serde_json::from_str(&t)
                .map_err(|e| CliError::Config(format!("{}: not a run summary: {e}", summary_path.display())))
        })?;
    let actual_path = dir.join("actual.csv");
    let file = fs::File::open(&actual_path).map_err(|e| CliError::Config(format!("{}: {e}", actual_path.display())))?;
    let table = read_actual_csv(file)?;
    let w = summary.stage_cost;
    let mut acc = 0.0;
    let mut total_cost = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        total_cost.push((row.k, acc));
        let xx: f64 = row.x.iter().map(|v| v * v).sum();
        let uu: f64 = row.u.iter().map(|v| v * v).sum();
        acc += w.state_weight * xx + w.input_weight * uu;
    }
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedTrace {
        label,
        weights: w,
        total_cost,
        final_state: table.rows.last().map(|r| r.x.clone()).unwrap_or_default(),
    })
}

/// Aligns the traces on `k`; refuses traces whose stage costs differ.
pub fn compare(traces: &[LoadedTrace]) -> Result<Comparison> {
    if traces.len() < 2 {
        return Err(CliError::Config(format!(
            "compare needs at least two traces, got {}",
            traces.len()
        )));
    }
    let reference = &traces[0];
    for t in &traces[1..] {
        if t.weights != reference.weights {
            return Err(CliError::Config(format!(
                "cannot compare total costs: {} uses state/input weights {}/{} but {} uses {}/{}",
                reference.label,
                reference.weights.state_weight,
                reference.weights.input_weight,
                t.label,
                t.weights.state_weight,
                t.weights.input_weight
            )));
        }
    }
    let mut traces = traces.to_vec();
    // Keep labels unique so every trace gets its own column.
    for i in 1..traces.len() {
        let taken = |l: &str, traces: &[LoadedTrace]| traces[..i].iter().any(|t| t.label == l);
        if taken(&traces[i].label, &traces) {
            let base = traces[i].label.clone();
            let mut n = 2;
            while taken(&format!("{base}#{n}"), &traces) {
                n += 1;
            }
            traces[i].label = format!("{base}#{n}");
        }
    }
    let rows = traces
        .iter()
        .map(|t| {
            let (final_k, end) = t.total_cost.last().copied().unwrap_or((0, 0.0));
            let start = t.total_cost.len().saturating_sub(TAIL + 1);
            ComparisonRow {
                label: t.label.clone(),
                final_k,
                total_cost_end: end,
                end_state_inf_norm: inf_norm(&t.final_state),
                tail_increment: end - t.total_cost.get(start).map_or(0.0, |c| c.1),
            }
        })
        .collect();
    Ok(Comparison { traces, rows })
}

pub fn write_comparison(cmp: &Comparison, out: &Path, svg: bool) -> Result<()> {
    fs::create_dir_all(out)?;
    let k_min = cmp
        .traces
        .iter()
        .filter_map(|t| t.total_cost.first())
        .map(|c| c.0)
        .min()
        .unwrap_or(0);
    let k_max = cmp
        .traces
        .iter()
        .filter_map(|t| t.total_cost.last())
        .map(|c| c.0)
        .max()
        .unwrap_or(0);
    let mut csv = String::from("k");
    for t in &cmp.traces {
        csv.push(',');
        csv.push_str(&t.label);
    }
    csv.push('\n');
    for k in k_min..=k_max {
        csv.push_str(&k.to_string());
        for t in &cmp.traces {
            csv.push(',');
            if let Some((_, c)) = t.total_cost.iter().find(|c| c.0 == k) {
                csv.push_str(&c.to_string());
            }
        }
        csv.push('\n');
    }
    fs::write(out.join("comparison.csv"), csv)?;

    let mut summary = String::from("label,final_k,total_cost_end,end_state_inf_norm,tail_increment_50\n");
    for r in &cmp.rows {
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label, r.final_k, r.total_cost_end, r.end_state_inf_norm, r.tail_increment
        ));
    }
    fs::write(out.join("comparison_summary.csv"), summary)?;

    if svg {
        let mut plot = Plot::new("Total cost comparison", "k", "sum of stage costs");
        for t in &cmp.traces {
            plot.series.push(Series::line(
                t.label.clone(),
                t.total_cost.iter().map(|(k, c)| (*k as f64, *c)).collect(),
            ));
        }
        fs::write(out.join("comparison.svg"), plot.render())?;
    }
    Ok(())
}
