use std::path::Path;

use serde::Serialize;
use stackbundle::telemetry::{self, speedup_report, RunTelemetry, SpeedupReport};
use stackbundle::{Error, Result};

use crate::run::Manifest;

/// Load a finished run directory (`<out_dir>/<run_id>`).
pub fn load_run(run_dir: &Path) -> Result<RunTelemetry> {
    let manifest = Manifest::read(run_dir)?;
    let csv = run_dir.join("telemetry.csv");
    if !csv.is_file() {
        return Err(Error::Config(format!("no telemetry in {}", run_dir.display())));
    }
    Ok(RunTelemetry {
        run_id: manifest.run_id,
        problem_hash: manifest.problem_hash,
        records: telemetry::read_csv(&csv)?,
    })
}

pub fn write_convergence(run: &RunTelemetry, path: &Path) -> Result<usize> {
    let table = run.convergence_table();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["iter", "cost"]).map_err(|e| Error::Io(e.into()))?;
    for (iter, cost) in &table {
        w.serialize((iter, cost)).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(table.len())
}

#[derive(Debug, Serialize)]
pub struct Report {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<SpeedupReport>,
    pub convergence_rows: usize,
}

/// Convergence table of `run` into `out/convergence.csv`; with a baseline,
/// also the speedup summary into `out/report.json`.
pub fn cmd_report(run: &Path, baseline: Option<&Path>, out: &Path) -> Result<Report> {
    let parallel = load_run(run)?;
    std::fs::create_dir_all(out)?;
    let rows = write_convergence(&parallel, &out.join("convergence.csv"))?;
    let speedup = match baseline {
        Some(b) => Some(speedup_report(&load_run(b)?, &parallel)?),
        None => None,
    };
    let report = Report {
        speedup,
        convergence_rows: rows,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("report.json"), text + "\n")?;
    Ok(report)
}
