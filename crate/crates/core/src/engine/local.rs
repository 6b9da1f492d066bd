//! In-process executor: M workers, each running up to `cores` tasks on its
//! own threads and owning its own block manager.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::block::{BlockManager, StorageConfig};
use super::compute::{PartitionOutput, SourceStore, Stage, WorkerEnv, WorkerStats};
use super::kernel::KernelRegistry;
use super::lineage::{BroadcastId, DatasetId};
use super::{Executor, StageResult, WorkerDesc};
use crate::dstack::Record;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub workers: usize,
    pub cores_per_worker: usize,
    pub storage: StorageConfig,
}

impl LocalConfig {
    pub fn new(workers: usize, cores_per_worker: usize) -> Self {
        LocalConfig {
            workers,
            cores_per_worker,
            storage: StorageConfig::unbounded(),
        }
    }
}

pub struct LocalExecutor {
    workers: Vec<Arc<WorkerEnv>>,
    sources: Arc<SourceStore>,
    duplicate_next: AtomicBool,
}

impl LocalExecutor {
    pub fn new(config: LocalConfig, registry: Arc<KernelRegistry>) -> Result<Self> {
        if config.workers == 0 || config.cores_per_worker == 0 {
            return Err(Error::Config("workers and cores must be at least 1".into()));
        }
        let sources = Arc::new(SourceStore::default());
        let workers = (0..config.workers)
            .map(|w| {
                let mut storage = config.storage.clone();
                storage.spill_dir = storage.spill_dir.join(format!("worker-{w}"));
                Arc::new(WorkerEnv::new(
                    w as u32,
                    config.cores_per_worker,
                    registry.clone(),
                    BlockManager::new(storage),
                    Box::new(sources.clone()),
                ))
            })
            .collect();
        Ok(LocalExecutor {
            workers,
            sources,
            duplicate_next: AtomicBool::new(false),
        })
    }

    /// Run the first task of the next stage twice, keeping the first result.
    pub fn inject_duplicate_task(&self) {
        self.duplicate_next.store(true, Ordering::SeqCst);
    }

    pub fn worker_env(&self, index: usize) -> &Arc<WorkerEnv> {
        &self.workers[index]
    }
}

impl Executor for LocalExecutor {
    fn workers(&self) -> Vec<WorkerDesc> {
        self.workers
            .iter()
            .map(|w| WorkerDesc {
                id: w.worker_id,
                cores: w.cores,
            })
            .collect()
    }

    fn sources(&self) -> Arc<SourceStore> {
        self.sources.clone()
    }

    fn run_stage(&mut self, stage: &Stage, assignment: &[Vec<usize>]) -> Result<StageResult> {
        let n = stage.lineage[&stage.target].num_partitions;
        let slots: Mutex<Vec<Option<Result<PartitionOutput>>>> =
            Mutex::new((0..n).map(|_| None).collect());
        let duplicate = self.duplicate_next.swap(false, Ordering::SeqCst);
        std::thread::scope(|scope| {
            for (w, parts) in self.workers.iter().zip(assignment) {
                if parts.is_empty() {
                    continue;
                }
                let next = Arc::new(AtomicUsize::new(0));
                for _ in 0..w.cores.min(parts.len()) {
                    let next = next.clone();
                    let slots = &slots;
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(&p) = parts.get(i) else { break };
                        let out = w.run_partition(stage, p);
                        slots.lock().unwrap()[p] = Some(out);
                    });
                }
            }
        });
        let mut outputs = Vec::with_capacity(n);
        for (p, slot) in slots.into_inner().unwrap().into_iter().enumerate() {
            let out = slot.ok_or_else(|| Error::Job(format!("partition {p} was never scheduled")))?;
            outputs.push(out?);
        }
        if duplicate {
            if let Some((w, parts)) = self
                .workers
                .iter()
                .zip(assignment)
                .find(|(_, parts)| !parts.is_empty())
            {
                let p = parts[0];
                let again = w.run_partition(stage, p)?;
                if again != outputs[p] {
                    return Err(Error::Job(format!(
                        "re-executed task for partition {p} produced a different result"
                    )));
                }
            }
        }
        let mut placement = vec![0u32; n];
        for (w, parts) in self.workers.iter().zip(assignment) {
            for &p in parts {
                placement[p] = w.worker_id;
            }
        }
        Ok(StageResult { outputs, placement })
    }

    fn broadcast(&mut self, id: BroadcastId, value: Arc<Record>) -> Result<()> {
        for w in &self.workers {
            w.put_broadcast(id, value.clone());
        }
        Ok(())
    }

    fn release(&mut self, id: BroadcastId) -> Result<()> {
        for w in &self.workers {
            w.release_broadcast(id);
        }
        Ok(())
    }

    fn drop_datasets(&mut self, ids: &[DatasetId]) -> Result<()> {
        for w in &self.workers {
            w.drop_datasets(ids)?;
        }
        Ok(())
    }

    fn worker_stats(&mut self) -> Result<Vec<WorkerStats>> {
        Ok(self.workers.iter().map(|w| w.stats()).collect())
    }

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}
