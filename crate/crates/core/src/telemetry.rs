//! Battery telemetry samples and their CSV export format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::BatteryState;

pub const CSV_HEADER: &str = "t_s,level_percent,charge_mwh";

/// One timestamped battery reading, `t_s` seconds after transfer start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub t_s: f64,
    pub level_percent: f64,
    pub charge_mwh: f64,
}

impl TelemetrySample {
    pub fn of(t_s: f64, battery: &BatteryState) -> Self {
        Self {
            t_s,
            level_percent: battery.level_percent(),
            charge_mwh: battery.charge_mwh(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CsvError {
    #[error("missing or wrong header, expected `{CSV_HEADER}`")]
    Header,
    #[error("line {line}: {detail}")]
    Row { line: usize, detail: String },
}

/// Renders a log as CSV, one row per sample, six decimal places.
pub fn log_to_csv(log: &[TelemetrySample]) -> String {
    let mut out = String::with_capacity(32 * (log.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in log {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", s.t_s, s.level_percent, s.charge_mwh);
    }
    out
}

pub fn log_from_csv(text: &str) -> Result<Vec<TelemetrySample>, CsvError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(CsvError::Header),
    }
    let mut log = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CsvError::Row {
                line: idx + 1,
                detail: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 3];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.trim().parse().map_err(|e| CsvError::Row {
                line: idx + 1,
                detail: format!("{f:?}: {e}"),
            })?;
        }
        log.push(TelemetrySample {
            t_s: vals[0],
            level_percent: vals[1],
            charge_mwh: vals[2],
        });
    }
    Ok(log)
}
