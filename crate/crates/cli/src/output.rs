//! CSV and JSON files written by `simulate`.

use mpfc_core::mpfc::{ClosedLoopLog, LogSummary};
use serde::Serialize;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

pub const CSV_COLUMNS: [&str; 18] = [
    "t",
    "q1",
    "q2",
    "qd1",
    "qd2",
    "theta",
    "thetadot",
    "u1",
    "u2",
    "v",
    "e1",
    "e2",
    "cart_x",
    "cart_y",
    "stage_cost",
    "ocp_cost",
    "solver_status",
    "terminal_margin",
];

pub fn write_csv(path: &Path, log: &ClosedLoopLog) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for r in &log.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.q[0],
            r.q[1],
            r.qdot[0],
            r.qdot[1],
            r.theta,
            r.thetadot,
            r.u[0],
            r.u[1],
            r.v,
            r.e[0],
            r.e[1],
            r.cart[0],
            r.cart[1],
            r.stage_cost,
            r.ocp_cost,
            r.status.as_str(),
            r.terminal_margin,
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSummary {
    pub name: String,
    /// "completed", "infeasible" or "aborted"
    pub outcome: String,
    pub error: Option<String>,
    pub summary: Option<LogSummary>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    s.push('\n');
    fs::write(path, s)
}
