//! CSV writers for per-round metrics and per-agent state traces.
//!
//! Floats are written in their shortest round-trip decimal form, so output is
//! byte-identical for identical runs.

use std::io::{self, Write};

use crate::engine::{MetricsRecord, StateRow};

pub const METRICS_HEADER: &str = "k,n,xbar,err,sum_x,sum_y,flags";
pub const STATES_HEADER: &str = "k,agent,active,x,y,z,xhat";

/// Shortest decimal string that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRecord]) -> io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k,
            r.n,
            format_float(r.x_bar),
            format_float(r.err),
            format_float(r.sum_x),
            format_float(r.sum_y),
            r.flags
        )?;
    }
    out.flush()
}

pub fn write_states_csv<W: Write>(mut out: W, rows: &[StateRow]) -> io::Result<()> {
    writeln!(out, "{STATES_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k,
            r.agent,
            u8::from(r.active),
            format_float(r.x),
            format_float(r.y),
            format_float(r.z),
            format_float(r.x_hat)
        )?;
    }
    out.flush()
}
