mod config;
mod gen;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::error;
use stackbundle::cluster::{run_worker, WorkerOptions};
use stackbundle::datagen::{GalaxyStackSpec, PatchPairSpec, SparseCoupledSpec};
use stackbundle::Error;

use config::{parse_override, ClusterSpec, RunConfig};

#[derive(Parser)]
#[command(name = "stackbundle", version, about = "Partitioned bundle engine with distributed deconvolution and dictionary learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as dstack files plus a JSON sidecar.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Run a solver from a JSON config.
    Run(RunArgs),
    /// Run a solver as cluster master, waiting for remote workers.
    Master {
        #[arg(long)]
        listen: String,
        /// Number of workers to wait for before starting.
        #[arg(long)]
        expect: usize,
        /// Write the bound address here once listening.
        #[arg(long)]
        addr_file: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve tasks for a master until it shuts down.
    Worker {
        #[arg(long)]
        master_addr: String,
        #[arg(long, default_value_t = 1)]
        cores: usize,
        /// Memory cap in bytes for cached blocks.
        #[arg(long)]
        memory_cap: Option<u64>,
        #[arg(long)]
        spill_dir: Option<PathBuf>,
        /// Requested worker id; the master assigns one by default.
        #[arg(long)]
        id: Option<u32>,
        #[arg(long, default_value_t = 5)]
        connect_attempts: u32,
    },
    /// Convergence table and optional speedup summary of finished runs.
    Report {
        /// Run directory (`<out_dir>/<run_id>`) to report on.
        #[arg(long)]
        run: PathBuf,
        /// Baseline run directory for the speedup summary.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    partitions: Option<usize>,
    #[arg(long)]
    partitions_factor: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// memory_only or memory_and_disk.
    #[arg(long)]
    persistence: Option<String>,
    #[arg(long)]
    memory_cap: Option<u64>,
    #[arg(long)]
    i_max: Option<usize>,
    /// Any other config key, as key=value (value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> stackbundle::Result<RunConfig> {
        let mut o = Vec::new();
        for s in &self.set {
            o.push(parse_override(s)?);
        }
        let mut put = |k: &str, v: serde_json::Value| o.push((k.to_string(), v));
        if let Some(v) = self.partitions {
            put("partitions", v.into());
        }
        if let Some(v) = self.partitions_factor {
            put("partitions_factor", v.into());
        }
        if let Some(v) = self.workers {
            put("workers", v.into());
        }
        if let Some(v) = &self.out_dir {
            put("out_dir", std::path::absolute(v)?.display().to_string().into());
        }
        if let Some(v) = &self.run_id {
            put("run_id", v.clone().into());
        }
        if let Some(v) = &self.persistence {
            put("persistence", v.clone().into());
        }
        if let Some(v) = self.memory_cap {
            put("memory_cap_bytes", v.into());
        }
        if let Some(v) = self.i_max {
            put("i_max", v.into());
        }
        RunConfig::load(&self.config, &o)
    }
}

#[derive(Subcommand)]
enum GenKind {
    /// Galaxy stamps blurred by spatially varying PSFs.
    Galaxy {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 41)]
        size: usize,
        /// Noise levels, assigned to images cyclically.
        #[arg(long, value_delimiter = ',', default_value = "0.01")]
        sigma: Vec<f64>,
        #[arg(long)]
        psf_size: Option<usize>,
        #[arg(long, default_value_t = 600)]
        unique_psfs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired high/low resolution patches from synthetic textures.
    Patches {
        #[arg(long, default_value_t = 5)]
        p: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        blur: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Samples generated by known coupled dictionaries and sparse codes.
    Coupled {
        #[arg(long, default_value_t = 25)]
        p: usize,
        #[arg(long, default_value_t = 9)]
        m: usize,
        #[arg(long, default_value_t = 2000)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        atoms: usize,
        #[arg(long, default_value_t = 5)]
        sparsity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 4,
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::Io(_) | Error::Comparison(_) => 2,
        _ => 3,
    }
}

fn gen(kind: GenKind) -> stackbundle::Result<Vec<String>> {
    match kind {
        GenKind::Galaxy {
            n,
            size,
            sigma,
            psf_size,
            unique_psfs,
            seed,
            out,
        } => gen::galaxy(
            &GalaxyStackSpec {
                n_images: n,
                stamp_size: size,
                psf_size,
                n_unique_psfs: unique_psfs,
                noise_sigma: sigma,
                seed,
            },
            &out,
        ),
        GenKind::Patches { p, m, k, blur, seed, out } => gen::patches(
            &PatchPairSpec {
                p_side: p,
                m_side: m,
                k,
                blur_sigma: blur,
                seed,
            },
            &out,
        ),
        GenKind::Coupled {
            p,
            m,
            k,
            atoms,
            sparsity,
            seed,
            out,
        } => gen::coupled(
            &SparseCoupledSpec {
                p,
                m,
                k,
                atoms,
                sparsity,
                seed,
            },
            &out,
        ),
    }
}

fn print_json(v: &impl serde::Serialize) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => error!("cannot print result: {e}"),
    }
}

fn dispatch(cli: Cli) -> stackbundle::Result<()> {
    match cli.command {
        Command::Gen { kind } => {
            for f in gen(kind)? {
                println!("{f}");
            }
        }
        Command::Run(args) => print_json(&run::cmd_run(&args.load()?)?),
        Command::Master {
            listen,
            expect,
            addr_file,
            run,
        } => {
            let mut cfg = run.load()?;
            cfg.cluster = Some(ClusterSpec {
                listen,
                expect,
                addr_file,
            });
            cfg.validate()?;
            print_json(&run::cmd_run(&cfg)?);
        }
        Command::Worker {
            master_addr,
            cores,
            memory_cap,
            spill_dir,
            id,
            connect_attempts,
        } => {
            let mut opts = WorkerOptions::new(master_addr, cores);
            opts.memory_cap = memory_cap;
            opts.worker_id = id;
            opts.connect_attempts = connect_attempts;
            opts.retry_delay = Duration::from_millis(500);
            let env_spill = std::env::var_os("STACKBUNDLE_SPILL_DIR").filter(|s| !s.is_empty()).map(PathBuf::from);
            if let Some(d) = spill_dir.or(env_spill) {
                opts.spill_dir = d;
            }
            opts.spill_dir = opts.spill_dir.join(format!("worker-{}", std::process::id()));
            let spill = opts.spill_dir.clone();
            let result = run_worker(opts, Arc::new(stackbundle::solver_registry()));
            let _ = std::fs::remove_dir_all(spill);
            result?;
        }
        Command::Report { run, baseline, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            print_json(&report::cmd_report(&run, baseline.as_deref(), &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
