//! TCP executor: a master that schedules stages over remote workers.

pub mod frame;
pub mod master;
pub mod wire;
pub mod worker;

use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::thread::JoinHandle;

pub use frame::{decode_frame, encode_frame, read_frame, write_frame, Frame, Opcode, MAX_PAYLOAD};
pub use master::{ClusterExecutor, MasterConfig};
pub use worker::{run_worker, WorkerOptions};

use crate::engine::kernel::KernelRegistry;
use crate::error::Result;

/// Start a master on an ephemeral localhost port with `workers` in-process
/// worker threads connected over TCP.
pub fn local_cluster(
    workers: usize,
    cores: usize,
    registry: Arc<KernelRegistry>,
    config: MasterConfig,
    spill_dir: &Path,
) -> Result<(ClusterExecutor, Vec<JoinHandle<Result<()>>>)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let handles = (0..workers)
        .map(|w| {
            let mut opts = WorkerOptions::new(addr.clone(), cores);
            opts.worker_id = Some(w as u32);
            opts.spill_dir = spill_dir.to_path_buf();
            let registry = registry.clone();
            std::thread::spawn(move || run_worker(opts, registry))
        })
        .collect();
    let config = MasterConfig {
        expected_workers: workers,
        ..config
    };
    let exec = ClusterExecutor::accept(listener, &registry, config)?;
    Ok((exec, handles))
}
