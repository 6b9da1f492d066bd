use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use stackbundle::cluster::{ClusterExecutor, MasterConfig};
use stackbundle::deconv::{self, DeconvProblem, NoiseSpec, Prior, SolveOptions};
use stackbundle::engine::{Context, LocalConfig, Persistence, StorageConfig};
use stackbundle::optim::ConvergenceMonitor;
use stackbundle::scdl::{self, ScdlProblem, TrainOptions};
use stackbundle::telemetry::{self, IterationMetrics, RunRecorder};
use stackbundle::{dstack, Error, Result};

use crate::config::{ClusterSpec, RunConfig, Solver};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SIDECAR: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub solver: Solver,
    pub problem_hash: String,
    pub iterations: usize,
    pub converged: bool,
    /// Final objective value for the deconvolution solvers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_cost: Option<f64>,
    /// Final `(high, low)` NRMSE for dictionary learning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_nrmse: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub partitions: usize,
    pub workers: usize,
    pub total_cores: usize,
    pub persistence: Persistence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_cap_bytes: Option<u64>,
    pub wall_ms: f64,
    pub telemetry_ms: f64,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad manifest {}: {e}", path.display())))
    }
}

fn spill_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os("STACKBUNDLE_SPILL_DIR") {
        Some(d) if !d.is_empty() => PathBuf::from(d).join(&cfg.run_id),
        _ => cfg.run_dir().join("spill"),
    }
}

fn local_context(cfg: &RunConfig, spill: &Path) -> Result<Context> {
    let mut lc = LocalConfig::new(cfg.workers, cfg.cores_per_worker);
    lc.storage = StorageConfig {
        mode: cfg.persistence,
        memory_cap_bytes: cfg.memory_cap_bytes,
        spill_dir: spill.to_path_buf(),
    };
    Context::local(lc, Arc::new(stackbundle::solver_registry()))
}

/// Bind `listen` and block until `expect` workers have registered.
pub fn cluster_context(cfg: &RunConfig, spec: &ClusterSpec) -> Result<Context> {
    let listener = TcpListener::bind(&spec.listen)
        .map_err(|e| Error::Config(format!("cannot listen on {}: {e}", spec.listen)))?;
    let addr = listener.local_addr()?;
    if let Some(f) = &spec.addr_file {
        std::fs::write(f, addr.to_string())?;
    }
    info!("master listening on {addr}, waiting for {} workers", spec.expect);
    let registry = Arc::new(stackbundle::solver_registry());
    let mut mc = MasterConfig::new(spec.expect);
    mc.mode = cfg.persistence;
    mc.memory_cap = cfg.memory_cap_bytes;
    let exec = ClusterExecutor::accept(listener, &registry, mc)?;
    Ok(Context::new(Box::new(exec), registry))
}

struct SolverRun {
    iterations: usize,
    converged: bool,
    final_cost: Option<f64>,
    final_nrmse: Option<(f64, f64)>,
    lambda: Option<f64>,
    metrics: Vec<IterationMetrics>,
    telemetry_ms: f64,
    outputs: Vec<String>,
}

fn run_deconv(ctx: &mut Context, cfg: &RunConfig, n: usize, dir: &Path) -> Result<SolverRun> {
    let y = dstack::read_file(cfg.input("y")?)?;
    let psf = dstack::read_file(cfg.input("psf")?)?;
    let prior = if cfg.solver == Solver::DeconvSparse {
        Prior::Sparse
    } else {
        Prior::LowRank
    };
    let noise = match &cfg.noise_sigma {
        Some(s) => NoiseSpec::Known(s.clone()),
        None => NoiseSpec::Estimate,
    };
    let mut problem = DeconvProblem::new(y, psf, noise, prior);
    problem.lambda = cfg.lambda;
    if let Some(j) = cfg.scales {
        problem.scales = j;
    }
    if let Some(k) = cfg.kappa {
        problem.kappa = k;
    }
    if let Some(r) = cfg.reweight_rounds {
        problem.reweight_rounds = r;
    }
    let mut opts = SolveOptions::new(n);
    if let Some(i) = cfg.i_max {
        opts.max_iter = i;
    }
    if let Some(e) = cfg.eps {
        opts.eps = e;
    }
    opts.telemetry = cfg.telemetry;
    opts.dump_dir = Some(dir.to_path_buf());
    let out = deconv::solve(ctx, &problem, &opts)?;
    dstack::write_file(dir.join("xp.dstack"), &out.xp)?;
    Ok(SolverRun {
        iterations: out.iterations,
        converged: out.converged,
        final_cost: out.cost_history.last().copied(),
        final_nrmse: None,
        lambda: out.lambda,
        metrics: out.metrics,
        telemetry_ms: out.telemetry_ms,
        outputs: vec!["xp.dstack".into()],
    })
}

fn run_scdl(ctx: &mut Context, cfg: &RunConfig, n: usize, dir: &Path) -> Result<SolverRun> {
    let s_h = dstack::read_file(cfg.input("s_h")?)?;
    let s_l = dstack::read_file(cfg.input("s_l")?)?;
    let atoms = cfg
        .atoms
        .ok_or_else(|| Error::Config("scdl needs `atoms`".into()))?;
    let mut problem = ScdlProblem::new(s_h, s_l, atoms);
    let s = &mut problem.steps;
    s.c1 = cfg.c1.unwrap_or(s.c1);
    s.c2 = cfg.c2.unwrap_or(s.c2);
    s.c3 = cfg.c3.unwrap_or(s.c3);
    s.lambda_h = cfg.lambda_h.unwrap_or(s.lambda_h);
    s.lambda_l = cfg.lambda_l.unwrap_or(s.lambda_l);
    problem.delta = cfg.delta.unwrap_or(problem.delta);
    problem.max_iter = cfg.i_max.unwrap_or(problem.max_iter);
    problem.seed = cfg.seed;
    let mut opts = TrainOptions::new(n);
    opts.telemetry = cfg.telemetry;
    opts.dump_dir = Some(dir.to_path_buf());
    let out = scdl::train(ctx, &problem, &opts)?;
    dstack::write_file(dir.join("x_h.dstack"), &out.x_h)?;
    dstack::write_file(dir.join("x_l.dstack"), &out.x_l)?;
    let mut w = csv::Writer::from_path(dir.join("nrmse.csv")).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["iter", "nrmse_h", "nrmse_l", "consensus"])
        .map_err(|e| Error::Io(e.into()))?;
    for (i, ((h, l), c)) in out.nrmse.iter().zip(&out.consensus).enumerate() {
        w.serialize((i + 1, h, l, c)).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    // No stopping rule; report whether the mean NRMSE settled by the eps rule.
    let mut monitor = ConvergenceMonitor::new(cfg.eps.unwrap_or(1e-4));
    let converged = out.nrmse.iter().fold(false, |hit, (h, l)| monitor.observe(0.5 * (h + l)) || hit);
    Ok(SolverRun {
        iterations: out.nrmse.len(),
        converged,
        final_cost: None,
        final_nrmse: out.nrmse.last().copied(),
        lambda: None,
        metrics: out.metrics,
        telemetry_ms: out.telemetry_ms,
        outputs: vec!["x_h.dstack".into(), "x_l.dstack".into(), "nrmse.csv".into()],
    })
}

/// Run the configured solver on a context and write every artifact.
pub fn execute(cfg: &RunConfig, ctx: &mut Context) -> Result<Manifest> {
    let started = Instant::now();
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    let hash = cfg.problem_hash()?;
    std::fs::write(
        dir.join(CONFIG_SIDECAR),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let total_cores = ctx.total_cores();
    let n = match (cfg.partitions, cfg.partitions_factor) {
        (Some(n), _) => n,
        (None, Some(f)) => f * total_cores,
        (None, None) => unreachable!("validated config"),
    };
    let workers = ctx.workers().len();
    info!("{} on {workers} workers ({total_cores} cores), N = {n}", cfg.solver.name());
    let run = match cfg.solver {
        Solver::DeconvSparse | Solver::DeconvLowrank => run_deconv(ctx, cfg, n, &dir)?,
        Solver::Scdl => run_scdl(ctx, cfg, n, &dir)?,
    };
    let mut recorder = RunRecorder::new(cfg.run_id.clone())?;
    for m in &run.metrics {
        recorder.record_iteration(m)?;
    }
    telemetry::write_csv(&cfg.out_dir, &cfg.run_id, &recorder.close())?;
    let manifest = Manifest {
        run_id: cfg.run_id.clone(),
        solver: cfg.solver,
        problem_hash: hash,
        iterations: run.iterations,
        converged: run.converged,
        final_cost: run.final_cost,
        final_nrmse: run.final_nrmse,
        lambda: run.lambda,
        partitions: n,
        workers,
        total_cores,
        persistence: cfg.persistence,
        memory_cap_bytes: cfg.memory_cap_bytes,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        telemetry_ms: run.telemetry_ms,
        outputs: run.outputs,
    };
    std::fs::write(
        dir.join(MANIFEST),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    Ok(manifest)
}

/// `run`: local executor, or the master role when the config names a cluster.
pub fn cmd_run(cfg: &RunConfig) -> Result<Manifest> {
    let spill = spill_root(cfg);
    let mut ctx = match &cfg.cluster {
        Some(spec) => cluster_context(cfg, spec)?,
        None => local_context(cfg, &spill)?,
    };
    let result = execute(cfg, &mut ctx);
    let closed = ctx.shutdown();
    if cfg.cluster.is_none() {
        let _ = std::fs::remove_dir_all(&spill);
    }
    let manifest = result?;
    closed?;
    Ok(manifest)
}
