//! Per-round, per-client metrics as CSV.
//!
//! Rows are ordered by `(round, client_id)`. Floats are written in
//! scientific notation with 17 significant digits so that every `f64`
//! round-trips exactly and reruns are byte-identical.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::orchestrator::RoundReport;
use crate::planner::format_assignment;

pub const HEADER: [&str; 10] = [
    "round",
    "client_id",
    "loss",
    "ppl",
    "split_j",
    "assigned_ranks",
    "I_g",
    "delta_I",
    "tau",
    "aggregated",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no reports to write")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("row {row}: bad {column} value {value:?}")]
    Parse { row: usize, column: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub client_id: u32,
    pub loss: f64,
    pub ppl: f64,
    pub split_j: usize,
    /// Canonical `"<block><kind>:<rank> ..."`, `-` when empty.
    pub assigned_ranks: String,
    pub global_importance: f64,
    pub delta_importance: f64,
    pub tau: f64,
    pub aggregated: bool,
}

/// 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn rows(reports: &[RoundReport]) -> Vec<MetricsRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| MetricsRow {
                round: r.round,
                client_id: c.client_id,
                loss: c.loss,
                ppl: c.ppl,
                split_j: r.split.j(),
                assigned_ranks: format_assignment(&c.assignment),
                global_importance: r.global_importance,
                delta_importance: r.delta_importance,
                tau: r.tau,
                aggregated: r.aggregated,
            })
        })
        .collect()
}

pub fn write_rows<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            format_float(r.loss),
            format_float(r.ppl),
            r.split_j.to_string(),
            r.assigned_ranks.clone(),
            format_float(r.global_importance),
            format_float(r.delta_importance),
            format_float(r.tau),
            r.aggregated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header plus one row per `(round, client)`.
pub fn write_csv<W: Write>(out: W, reports: &[RoundReport]) -> Result<(), MetricsError> {
    write_rows(out, &rows(reports))
}

pub fn emit_csv(path: &Path, reports: &[RoundReport]) -> Result<(), MetricsError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(&mut out, reports)?;
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        fn parse<T: std::str::FromStr>(row: usize, column: &'static str, v: &str) -> Result<T, MetricsError> {
            v.parse().map_err(|_| MetricsError::Parse {
                row,
                column,
                value: v.to_string(),
            })
        }
        out.push(MetricsRow {
            round: parse(i, HEADER[0], field(0))?,
            client_id: parse(i, HEADER[1], field(1))?,
            loss: parse(i, HEADER[2], field(2))?,
            ppl: parse(i, HEADER[3], field(3))?,
            split_j: parse(i, HEADER[4], field(4))?,
            assigned_ranks: field(5).to_string(),
            global_importance: parse(i, HEADER[6], field(6))?,
            delta_importance: parse(i, HEADER[7], field(7))?,
            tau: parse(i, HEADER[8], field(8))?,
            aggregated: parse(i, HEADER[9], field(9))?,
        });
    }
    Ok(out)
}
