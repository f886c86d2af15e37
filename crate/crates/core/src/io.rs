//! CSV serialization of traces, verification reports and solver logs.
//!
//! Column orders are fixed:
//!
//! * `actual.csv`: `k, x1..xn, u1..up, V, instance_id`. The last row is the
//!   final state `x(K)` with empty input and instance cells.
//! * `instances.csv`: `instance_id, k_start, l_decr, solve_status, adc_residual, objective`
//!   (`adc_residual` empty for standard runs).
//! * `predictions.csv`: `instance_id, l, k, V, role` with role one of
//!   `initial`, `kept`, `chosen`, `discarded`.
//! * verification: `state_id, verified, residual, w1..wN`.
//! * solver log: `outer, inner, objective, violation, penalty`.
//!
//! Floats are written in Rust's shortest round-trip form.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::lyapunov::VerificationReport;
use crate::mpc::MpcTrace;
use crate::nlp::OuterRecord;

fn num(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, line: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Csv(format!("line {line}: column {col}: cannot parse {s:?} as a number")))
}

fn parse_usize(s: &str, line: usize, col: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::Csv(format!("line {line}: column {col}: cannot parse {s:?} as an integer")))
}

pub fn write_actual_csv<W: Write>(trace: &MpcTrace, out: W) -> Result<()> {
    let (n, p) = (trace.state_dim, trace.input_dim);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=p).map(|i| format!("u{i}")));
    header.push("V".into());
    header.push("instance_id".into());
    w.write_record(&header)?;
    for a in &trace.actual {
        let mut row = vec![a.k.to_string()];
        row.extend(a.x.iter().map(|v| num(*v)));
        row.extend(a.u.iter().map(|v| num(*v)));
        row.push(num(a.v));
        row.push(a.instance_id.to_string());
        w.write_record(&row)?;
    }
    let mut row = vec![trace.final_k().to_string()];
    row.extend(trace.final_state.iter().map(|v| num(*v)));
    row.extend(std::iter::repeat_n(String::new(), p));
    row.push(num(trace.final_v));
    row.push(String::new());
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

pub fn write_instances_csv<W: Write>(trace: &MpcTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "instance_id",
        "k_start",
        "l_decr",
        "solve_status",
        "adc_residual",
        "objective",
    ])?;
    for i in &trace.instances {
        w.write_record([
            i.id.to_string(),
            i.k_start.to_string(),
            i.l_decr.to_string(),
            i.solve.status.to_string(),
            i.adc_residual.map(num).unwrap_or_default(),
            num(i.solve.objective),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions_csv<W: Write>(trace: &MpcTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instance_id", "l", "k", "V", "role"])?;
    for i in &trace.instances {
        for (l, v) in i.v_pred.iter().enumerate() {
            let role = match l {
                0 => "initial",
                l if l == i.l_decr => "chosen",
                l if l < i.l_decr => "kept",
                _ => "discarded",
            };
            w.write_record([
                i.id.to_string(),
                l.to_string(),
                (i.k_start + l).to_string(),
                num(*v),
                role.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_verification_csv<W: Write>(report: &VerificationReport, out: W) -> Result<()> {
    let width = report.entries.iter().map(|e| e.witness.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["state_id".to_string(), "verified".into(), "residual".into()];
    header.extend((1..=width).map(|i| format!("w{i}")));
    w.write_record(&header)?;
    for e in &report.entries {
        let mut row = vec![
            e.state_id.to_string(),
            u8::from(e.verified).to_string(),
            num(e.residual),
        ];
        row.extend(e.witness.iter().map(|v| num(*v)));
        row.resize(3 + width, String::new());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_solver_log_csv<W: Write>(records: &[OuterRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["outer", "inner", "objective", "violation", "penalty"])?;
    for r in records {
        w.write_record([
            r.outer.to_string(),
            r.inner.to_string(),
            num(r.objective),
            num(r.violation),
            num(r.penalty),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A row of `actual.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActualRow {
    pub k: usize,
    pub x: Vec<f64>,
    /// Empty on the final row.
    pub u: Vec<f64>,
    pub v: f64,
    pub instance_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActualTable {
    pub state_dim: usize,
    pub input_dim: usize,
    pub rows: Vec<ActualRow>,
}

impl ActualTable {
    /// Rows with an implemented input (all but the final one).
    pub fn steps(&self) -> impl Iterator<Item = &ActualRow> {
        self.rows.iter().filter(|r| !r.u.is_empty())
    }
}

pub fn read_actual_csv<R: Read>(input: R) -> Result<ActualTable> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let n = cols.iter().filter(|c| c.starts_with('x')).count();
    let p = cols.iter().filter(|c| c.starts_with('u')).count();
    if cols.len() != n + p + 3
        || cols.first() != Some(&"k")
        || cols[n + p + 1] != "V"
        || cols[n + p + 2] != "instance_id"
    {
        return Err(Error::Csv(format!("unexpected actual-trace header {cols:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let k = parse_usize(&rec[0], line, "k")?;
        let x = (1..=n)
            .map(|j| parse_f64(&rec[j], line, "x"))
            .collect::<Result<Vec<_>>>()?;
        let u = if rec[n + 1].is_empty() {
            Vec::new()
        } else {
            (n + 1..=n + p)
                .map(|j| parse_f64(&rec[j], line, "u"))
                .collect::<Result<Vec<_>>>()?
        };
        let v = parse_f64(&rec[n + p + 1], line, "V")?;
        let instance_id = match &rec[n + p + 2] {
            "" => None,
            s => Some(parse_usize(s, line, "instance_id")?),
        };
        rows.push(ActualRow {
            k,
            x,
            u,
            v,
            instance_id,
        });
    }
    Ok(ActualTable {
        state_dim: n,
        input_dim: p,
        rows,
    })
}

/// A row of `instances.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRow {
    pub instance_id: usize,
    pub k_start: usize,
    pub l_decr: usize,
    pub solve_status: String,
    pub adc_residual: Option<f64>,
    pub objective: f64,
}

pub fn read_instances_csv<R: Read>(input: R) -> Result<Vec<InstanceRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 6 {
            return Err(Error::Csv(format!(
                "line {line}: expected 6 columns, got {}",
                rec.len()
            )));
        }
        rows.push(InstanceRow {
            instance_id: parse_usize(&rec[0], line, "instance_id")?,
            k_start: parse_usize(&rec[1], line, "k_start")?,
            l_decr: parse_usize(&rec[2], line, "l_decr")?,
            solve_status: rec[3].to_string(),
            adc_residual: match &rec[4] {
                "" => None,
                s => Some(parse_f64(s, line, "adc_residual")?),
            },
            objective: parse_f64(&rec[5], line, "objective")?,
        });
    }
    Ok(rows)
}

/// A row of `predictions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub instance_id: usize,
    pub l: usize,
    pub k: usize,
    pub v: f64,
    pub role: String,
}

pub fn read_predictions_csv<R: Read>(input: R) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 5 {
            return Err(Error::Csv(format!(
                "line {line}: expected 5 columns, got {}",
                rec.len()
            )));
        }
        rows.push(PredictionRow {
            instance_id: parse_usize(&rec[0], line, "instance_id")?,
            l: parse_usize(&rec[1], line, "l")?,
            k: parse_usize(&rec[2], line, "k")?,
            v: parse_f64(&rec[3], line, "V")?,
            role: rec[4].to_string(),
        });
    }
    Ok(rows)
}
