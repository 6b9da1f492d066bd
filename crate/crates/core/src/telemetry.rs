//! Per-iteration run records, CSV persistence and speedup summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::WorkerStats;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "run_id,iter,worker_id,wall_ms,cost,mem_bytes_used,disk_bytes_used,evictions,spills,recomputes";

/// `worker_id` of the driver row of each iteration.
pub const DRIVER_ROW: i64 = -1;

/// What a solver reports after each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iter: usize,
    pub wall_ms: f64,
    /// Objective value (deconvolution) or mean NRMSE (dictionary learning).
    pub cost: f64,
    pub workers: Vec<WorkerStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub iter: usize,
    pub worker_id: i64,
    pub wall_ms: f64,
    /// Only set on driver rows.
    pub cost: Option<f64>,
    pub mem_bytes_used: u64,
    pub disk_bytes_used: u64,
    pub evictions: u64,
    pub spills: u64,
    pub recomputes: u64,
}

/// Buffers rows of one run; closing hands them back and refuses further rows.
#[derive(Debug)]
pub struct RunRecorder {
    run_id: String,
    rows: Vec<RunRecord>,
    last: BTreeMap<i64, (u64, u64, u64)>,
    closed: bool,
}

impl RunRecorder {
    pub fn new(run_id: impl Into<String>) -> Result<Self> {
        let run_id = run_id.into();
        if run_id.is_empty() || run_id.contains([',', '"', '\n', '/', '\\']) {
            return Err(Error::Config(format!("run id {run_id:?} is not a plain name")));
        }
        Ok(RunRecorder {
            run_id,
            rows: Vec::new(),
            last: BTreeMap::new(),
            closed: false,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// One row per worker (ascending id) followed by the driver row.
    pub fn record_iteration(&mut self, m: &IterationMetrics) -> Result<()> {
        if self.closed {
            return Err(Error::State(format!("run {} is closed", self.run_id)));
        }
        if !(m.wall_ms >= 0.0) {
            return Err(Error::State(format!("negative wall time {}", m.wall_ms)));
        }
        let mut workers = m.workers.clone();
        workers.sort_by_key(|w| w.worker_id);
        for w in &workers {
            let id = w.worker_id as i64;
            let b = w.blocks;
            let now = (b.evictions, b.spills, b.recomputes);
            if let Some(&prev) = self.last.get(&id) {
                if now.0 < prev.0 || now.1 < prev.1 || now.2 < prev.2 {
                    return Err(Error::State(format!("counters of worker {id} went backwards")));
                }
            }
            self.last.insert(id, now);
            self.rows.push(RunRecord {
                run_id: self.run_id.clone(),
                iter: m.iter,
                worker_id: id,
                wall_ms: m.wall_ms,
                cost: None,
                mem_bytes_used: b.mem_bytes,
                disk_bytes_used: b.disk_bytes,
                evictions: b.evictions,
                spills: b.spills,
                recomputes: b.recomputes,
            });
        }
        self.rows.push(RunRecord {
            run_id: self.run_id.clone(),
            iter: m.iter,
            worker_id: DRIVER_ROW,
            wall_ms: m.wall_ms,
            cost: Some(m.cost),
            mem_bytes_used: 0,
            disk_bytes_used: 0,
            evictions: 0,
            spills: 0,
            recomputes: 0,
        });
        Ok(())
    }

    pub fn rows(&self) -> &[RunRecord] {
        &self.rows
    }

    pub fn close(&mut self) -> Vec<RunRecord> {
        self.closed = true;
        std::mem::take(&mut self.rows)
    }
}

pub fn to_csv(rows: &[RunRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::State(e.to_string()))?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    out.push_str(std::str::from_utf8(&body).map_err(|e| Error::State(e.to_string()))?);
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("telemetry csv: {e}"))
}

pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected telemetry header {:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Path of the telemetry file of `run_id` under `out_dir`.
pub fn csv_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join(run_id).join("telemetry.csv")
}

pub fn write_csv(out_dir: &Path, run_id: &str, rows: &[RunRecord]) -> Result<PathBuf> {
    let path = csv_path(out_dir, run_id);
    fs::create_dir_all(path.parent().unwrap())?;
    fs::write(&path, to_csv(rows)?)?;
    Ok(path)
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Linear-interpolation percentile of ascending `sorted` data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Comparison("percentile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("percentile {q} outside [0, 1]")));
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
}

impl Dispersion {
    pub fn of(samples: &[f64]) -> Result<Self> {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Dispersion {
            p25: percentile(&s, 0.25)?,
            median: percentile(&s, 0.5)?,
            p75: percentile(&s, 0.75)?,
        })
    }
}

/// A finished run as read back for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTelemetry {
    pub run_id: String,
    pub problem_hash: String,
    pub records: Vec<RunRecord>,
}

impl RunTelemetry {
    pub fn driver_rows(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| r.worker_id == DRIVER_ROW)
    }

    pub fn iteration_walls(&self) -> Vec<f64> {
        self.driver_rows().map(|r| r.wall_ms).collect()
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.iteration_walls().iter().sum()
    }

    /// `(iter, cost)` per executed iteration.
    pub fn convergence_table(&self) -> Vec<(usize, f64)> {
        self.driver_rows()
            .map(|r| (r.iter, r.cost.unwrap_or(f64::NAN)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub baseline_run: String,
    pub parallel_run: String,
    pub iterations: usize,
    pub baseline_total_ms: f64,
    pub parallel_total_ms: f64,
    pub speedup: f64,
    pub baseline_iteration_ms: Dispersion,
    pub parallel_iteration_ms: Dispersion,
}

pub fn speedup_report(baseline: &RunTelemetry, parallel: &RunTelemetry) -> Result<SpeedupReport> {
    if baseline.problem_hash != parallel.problem_hash {
        return Err(Error::Comparison(format!(
            "runs {} and {} solved different problems",
            baseline.run_id, parallel.run_id
        )));
    }
    let (b, p) = (baseline.iteration_walls(), parallel.iteration_walls());
    if b.is_empty() || p.is_empty() {
        return Err(Error::Comparison("a run has no iterations".into()));
    }
    let (bt, pt) = (baseline.total_wall_ms(), parallel.total_wall_ms());
    if !(pt > 0.0) {
        return Err(Error::Comparison(format!("run {} has zero wall time", parallel.run_id)));
    }
    Ok(SpeedupReport {
        baseline_run: baseline.run_id.clone(),
        parallel_run: parallel.run_id.clone(),
        iterations: p.len(),
        baseline_total_ms: bt,
        parallel_total_ms: pt,
        speedup: bt / pt,
        baseline_iteration_ms: Dispersion::of(&b)?,
        parallel_iteration_ms: Dispersion::of(&p)?,
    })
}
