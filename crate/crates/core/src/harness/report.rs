//! Experiment reports and their files.
//!
//! `emit_report` writes into one directory:
//!
//! - `report.csv`: one row per run (per epsilon, or per shape, radius and
//!   resolution for capacity studies); numbers in shortest round-trip
//!   scientific notation;
//! - `report.json`: the whole report, readable by [`ExperimentReport::read`];
//! - `errors.svg`: error norms against epsilon on log axes (homogenization
//!   experiments);
//! - `ledger_<label>.csv` / `.svg`: energy ledgers of evolution runs;
//! - `brinkman.json`: the friction matrix when it was computed;
//! - `timings.csv`: wall-clock seconds per run (when known). This is the
//!   only file that changes between reruns of the same configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;
use super::plot::{Plot, Series};
use crate::capacity::BrinkmanMatrix;
use crate::error::{Error, Result};
use crate::evolution::EnergyLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Num(f64),
    Text(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Num(x) => Some(*x),
            Value::Text(_) => None,
        }
    }

    fn to_csv(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Num(x) => format!("{x:e}"),
            Value::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Num(x)
    }
}

impl From<usize> for Value {
    fn from(i: usize) -> Self {
        Value::Int(i as i64)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub code_version: String,
    /// Set when a run failed part way; the rows before the failure are kept.
    pub partial: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    pub ledgers: Vec<(String, EnergyLedger)>,
    pub brinkman: Option<BrinkmanMatrix>,
    /// Wall-clock seconds per run; written to `timings.csv` only.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

pub const STATIONARY_COLUMNS: [&str; 14] = [
    "epsilon",
    "resolution",
    "holes",
    "cells_per_radius",
    "resolution_quality",
    "folded_axes",
    "brinkman_error",
    "blind_error",
    "perforated_norm",
    "brinkman_norm",
    "perforated_iterations",
    "brinkman_iterations",
    "rel_momentum",
    "rel_divergence",
];

pub const EVOLUTION_COLUMNS: [&str; 14] = [
    "epsilon",
    "resolution",
    "holes",
    "cells_per_radius",
    "resolution_quality",
    "velocity_error",
    "blind_velocity_error",
    "density_error",
    "snapshots",
    "steps",
    "max_div_residual",
    "ledger_residual",
    "mass_drift",
    "energy_excess",
];

pub const CAPACITY_COLUMNS: [&str; 17] = [
    "shape",
    "r",
    "resolution",
    "C11",
    "C12",
    "C13",
    "C21",
    "C22",
    "C23",
    "C31",
    "C32",
    "C33",
    "rel_momentum",
    "rel_divergence",
    "iterations",
    "cells",
    "mesh",
];

impl ExperimentReport {
    pub fn new(kind: ExperimentKind, config_hash: String) -> Self {
        let columns: &[&str] = match kind {
            ExperimentKind::CapacityStudy => &CAPACITY_COLUMNS,
            ExperimentKind::StationaryHomogenization => &STATIONARY_COLUMNS,
            ExperimentKind::EvolutionHomogenization => &EVOLUTION_COLUMNS,
        };
        ExperimentReport {
            kind,
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            partial: None,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            ledgers: Vec::new(),
            brinkman: None,
            timings: Vec::new(),
        }
    }

    pub fn is_partial(&self) -> bool {
        self.partial.is_some()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of one column, row by row.
    pub fn numbers(&self, name: &str) -> Vec<f64> {
        match self.column(name) {
            Some(i) => self.rows.iter().map(|r| r[i].as_f64().unwrap_or(f64::NAN)).collect(),
            None => Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Value::to_csv).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Error norms against epsilon, one series per error column.
    pub fn error_plot(&self) -> Option<Plot> {
        let (title, ys): (&str, &[&str]) = match self.kind {
            ExperimentKind::CapacityStudy => return None,
            ExperimentKind::StationaryHomogenization => {
                ("Steady flow: distance to the limit models", &["brinkman_error", "blind_error"])
            }
            ExperimentKind::EvolutionHomogenization => (
                "Evolution: distance to the limit models",
                &["velocity_error", "blind_velocity_error", "density_error"],
            ),
        };
        let eps = self.numbers("epsilon");
        let series = ys
            .iter()
            .map(|c| Series { name: c.to_string(), points: eps.iter().copied().zip(self.numbers(c)).collect() })
            .collect();
        Some(Plot {
            title: title.into(),
            x_label: "epsilon".into(),
            y_label: "error".into(),
            log_x: true,
            log_y: true,
            markers: true,
            series,
        })
    }
}

pub fn ledger_plot(label: &str, ledger: &EnergyLedger) -> Plot {
    let col = |f: fn(&crate::evolution::LedgerRow) -> f64| ledger.rows.iter().map(|r| (r.t, f(r))).collect();
    Plot {
        title: format!("Energy ledger {label}"),
        x_label: "t".into(),
        y_label: "energy".into(),
        log_x: false,
        log_y: false,
        markers: false,
        series: vec![
            Series { name: "kinetic".into(), points: col(|r| r.kinetic) },
            Series { name: "dissipation".into(), points: col(|r| r.dissipation) },
            Series { name: "work".into(), points: col(|r| r.work) },
        ],
    }
}

/// Writes the report files into `dir` (created if missing) and returns
/// their paths.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, content: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, content)?;
        written.push(p);
        Ok(())
    };
    put("report.csv", &report.to_csv())?;
    put("report.json", &report.to_json())?;
    if let Some(plot) = report.error_plot() {
        put("errors.svg", &plot.to_svg())?;
    }
    for (label, ledger) in &report.ledgers {
        put(&format!("ledger_{label}.csv"), &ledger.to_csv())?;
        put(&format!("ledger_{label}.svg"), &ledger_plot(label, ledger).to_svg())?;
    }
    if let Some(b) = &report.brinkman {
        put("brinkman.json", &(b.to_json() + "\n"))?;
    }
    // a report read back from JSON has no timings; keep the original file
    if !report.timings.is_empty() {
        let mut t = String::from("run,seconds\n");
        for (label, secs) in &report.timings {
            t.push_str(&format!("{label},{secs:.3}\n"));
        }
        put("timings.csv", &t)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        let r = ExperimentReport::new(ExperimentKind::StationaryHomogenization, "h".into());
        assert_eq!(r.to_csv(), STATIONARY_COLUMNS.join(",") + "\n");
    }

    #[test]
    fn json_round_trip() {
        let mut r = ExperimentReport::new(ExperimentKind::StationaryHomogenization, "h".into());
        let mut row: Vec<Value> = vec![0.5.into(), 32usize.into(), 1usize.into(), 2.0.into(), "coarse".into()];
        row.extend((5..STATIONARY_COLUMNS.len()).map(|i| Value::Num(i as f64 * 0.1)));
        r.rows.push(row);
        let back: ExperimentReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.to_csv(), r.to_csv());
    }
}
