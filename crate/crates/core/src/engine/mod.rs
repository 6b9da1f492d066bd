//! Lazy partitioned datasets and the driver-side scheduler.
//!
//! A [`Context`] owns the lineage DAG and an [`Executor`]. Transformations
//! (`zip`, `map`, `unbundle`) only add lineage nodes; actions (`collect`,
//! `reduce`, `count`, `checkpoint`) schedule one stage over all partitions.

pub mod block;
pub mod compute;
pub mod kernel;
pub mod lineage;
pub mod local;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use block::{BlockId, BlockStats, Persistence, StorageConfig};
pub use compute::{Action, PartitionOutput, SourceStore, Stage, WorkerEnv, WorkerStats};
pub use kernel::{KernelArgs, KernelBody, KernelRegistry};
pub use lineage::{BroadcastId, DatasetId, MapSpec, Node, NodeKind};
pub use local::{LocalConfig, LocalExecutor};

use crate::dstack::Record;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use lineage::{partition_sizes, Lineage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerDesc {
    pub id: u32,
    pub cores: usize,
}

/// Per-partition outputs in partition order and the worker that produced each.
#[derive(Debug)]
pub struct StageResult {
    pub outputs: Vec<PartitionOutput>,
    pub placement: Vec<u32>,
}

pub trait Executor: Send {
    fn workers(&self) -> Vec<WorkerDesc>;
    fn sources(&self) -> Arc<SourceStore>;
    /// `assignment[i]` lists the partitions for the i-th worker of `workers()`.
    fn run_stage(&mut self, stage: &Stage, assignment: &[Vec<usize>]) -> Result<StageResult>;
    fn broadcast(&mut self, id: BroadcastId, value: Arc<Record>) -> Result<()>;
    fn release(&mut self, id: BroadcastId) -> Result<()>;
    fn drop_datasets(&mut self, ids: &[DatasetId]) -> Result<()>;
    fn worker_stats(&mut self) -> Result<Vec<WorkerStats>>;
    fn shutdown(&mut self) -> Result<()>;
}

/// Split `n` partitions over workers in proportion to their cores.
///
/// Quotas use largest remainders (ties to the lower worker id). Each partition
/// first goes to its preferred worker if that worker has quota left; the rest
/// fill workers in id order.
pub fn assign_partitions(workers: &[WorkerDesc], n: usize, preferred: &[Option<u32>]) -> Vec<Vec<usize>> {
    let total: usize = workers.iter().map(|w| w.cores).sum();
    let mut quota: Vec<usize> = workers.iter().map(|w| n * w.cores / total).collect();
    let mut order: Vec<usize> = (0..workers.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n * workers[i].cores % total), workers[i].id));
    let short = n - quota.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        quota[i] += 1;
    }
    let mut out = vec![Vec::new(); workers.len()];
    let mut pending = Vec::new();
    for p in 0..n {
        let slot = preferred
            .get(p)
            .copied()
            .flatten()
            .and_then(|id| workers.iter().position(|w| w.id == id))
            .filter(|&i| out[i].len() < quota[i]);
        match slot {
            Some(i) => out[i].push(p),
            None => pending.push(p),
        }
    }
    let mut by_id: Vec<usize> = (0..workers.len()).collect();
    by_id.sort_by_key(|&i| workers[i].id);
    let mut cursor = 0;
    for p in pending {
        while out[by_id[cursor]].len() >= quota[by_id[cursor]] {
            cursor += 1;
        }
        out[by_id[cursor]].push(p);
    }
    for parts in &mut out {
        parts.sort_unstable();
    }
    out
}

/// Handle to a dataset in a [`Context`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dataset {
    pub id: DatasetId,
    pub num_partitions: usize,
}

pub struct Context {
    executor: Box<dyn Executor>,
    registry: Arc<KernelRegistry>,
    sources: Arc<SourceStore>,
    lineage: Lineage,
    locations: BTreeMap<DatasetId, Vec<u32>>,
    next_stage: u64,
    next_broadcast: BroadcastId,
    truncate_lineage: bool,
}

impl Context {
    pub fn new(executor: Box<dyn Executor>, registry: Arc<KernelRegistry>) -> Self {
        let sources = executor.sources();
        Context {
            executor,
            registry,
            sources,
            lineage: Lineage::default(),
            locations: BTreeMap::new(),
            next_stage: 0,
            next_broadcast: 0,
            truncate_lineage: true,
        }
    }

    /// Shorthand for a context over an in-process executor.
    pub fn local(config: LocalConfig, registry: Arc<KernelRegistry>) -> Result<Self> {
        let exec = LocalExecutor::new(config, registry.clone())?;
        Ok(Context::new(Box::new(exec), registry))
    }

    pub fn registry(&self) -> &Arc<KernelRegistry> {
        &self.registry
    }

    pub fn workers(&self) -> Vec<WorkerDesc> {
        self.executor.workers()
    }

    pub fn total_cores(&self) -> usize {
        self.workers().iter().map(|w| w.cores).sum()
    }

    /// When disabled, `checkpoint` materializes without cutting the lineage.
    pub fn set_truncate_lineage(&mut self, on: bool) {
        self.truncate_lineage = on;
    }

    pub fn truncates_lineage(&self) -> bool {
        self.truncate_lineage
    }

    /// Kernel invocations performed with this context's registry so far.
    pub fn kernel_invocations(&self) -> u64 {
        self.registry.invocations()
    }

    pub fn stages_run(&self) -> u64 {
        self.next_stage
    }

    pub fn lineage_len(&self) -> usize {
        self.lineage.len()
    }

    pub fn lineage_depth(&self, d: Dataset) -> Result<usize> {
        self.lineage.depth(d.id)
    }

    pub fn node(&self, d: Dataset) -> Result<&Node> {
        self.lineage.get(d.id)
    }

    /// Worker that last materialized each partition of `d`, if any did.
    pub fn placement(&self, d: Dataset) -> Option<Vec<u32>> {
        self.locations.get(&d.id).cloned()
    }

    pub fn partition_counts(&self, d: Dataset) -> Result<Option<Vec<usize>>> {
        Ok(self.lineage.get(d.id)?.counts.clone())
    }

    /// Split a stack along its leading axis into 1-tuple records.
    pub fn parallelize(&mut self, stack: &Tensor, partitions: usize) -> Result<Dataset> {
        let records = (0..stack.num_records())
            .map(|i| stack.record(i).map(|t| vec![t]))
            .collect::<Result<Vec<_>>>()?;
        self.parallelize_records(records, partitions)
    }

    pub fn parallelize_records(&mut self, records: Vec<Record>, partitions: usize) -> Result<Dataset> {
        let sizes = partition_sizes(records.len(), partitions)?;
        let id = self.lineage.insert(Node {
            kind: NodeKind::Source,
            num_partitions: partitions,
            counts: Some(sizes.clone()),
        })?;
        let mut it = records.into_iter();
        for (p, &s) in sizes.iter().enumerate() {
            let block: Vec<Record> = it.by_ref().take(s).collect();
            self.sources.insert((id, p), Arc::new(block));
        }
        Ok(Dataset {
            id,
            num_partitions: partitions,
        })
    }

    /// Bundle k identically partitioned datasets into k-tuples (slots concatenated).
    pub fn zip(&mut self, parts: &[Dataset]) -> Result<Dataset> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Bundle {
                message: "nothing to bundle".into(),
                datasets: Vec::new(),
            })?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let ids: Vec<DatasetId> = parts.iter().map(|d| d.id).collect();
        let counts = self.lineage.get(first.id)?.counts.clone();
        for d in &parts[1..] {
            if d.num_partitions != first.num_partitions {
                return Err(Error::Bundle {
                    message: format!(
                        "partition counts differ ({} vs {})",
                        first.num_partitions, d.num_partitions
                    ),
                    datasets: vec![first.id, d.id],
                });
            }
            let other = self.lineage.get(d.id)?.counts.clone();
            if counts.is_none() || other.is_none() {
                return Err(Error::Bundle {
                    message: "record counts unknown; checkpoint before bundling".into(),
                    datasets: ids,
                });
            }
            if other != counts {
                return Err(Error::Bundle {
                    message: "per-partition record counts differ".into(),
                    datasets: vec![first.id, d.id],
                });
            }
        }
        let id = self.lineage.insert(Node {
            kind: NodeKind::Zip { parents: ids },
            num_partitions: first.num_partitions,
            counts,
        })?;
        Ok(Dataset { id, ..first })
    }

    pub fn map(&mut self, d: Dataset, spec: MapSpec) -> Result<Dataset> {
        let counts = match self.registry.body(&spec.kernel)? {
            KernelBody::Record(_) => self.lineage.get(d.id)?.counts.clone(),
            KernelBody::Partition(_) => None,
            KernelBody::Combine { .. } => {
                return Err(Error::Registry(format!(
                    "kernel `{}` cannot be used as a map",
                    spec.kernel
                )))
            }
        };
        let id = self.lineage.insert(Node {
            kind: NodeKind::Map { parent: d.id, spec },
            num_partitions: d.num_partitions,
            counts,
        })?;
        Ok(Dataset { id, ..d })
    }

    /// Project one slot of a bundle as its own dataset.
    pub fn unbundle(&mut self, d: Dataset, slot: usize) -> Result<Dataset> {
        let counts = self.lineage.get(d.id)?.counts.clone();
        let id = self.lineage.insert(Node {
            kind: NodeKind::Unbundle { parent: d.id, slot },
            num_partitions: d.num_partitions,
            counts,
        })?;
        Ok(Dataset { id, ..d })
    }

    fn preferred(&self, d: DatasetId, p: usize) -> Option<u32> {
        let mut cur = d;
        loop {
            if let Some(&w) = self.locations.get(&cur).and_then(|l| l.get(p)) {
                return Some(w);
            }
            let node = self.lineage.get(cur).ok()?;
            cur = *node.parents().first()?;
        }
    }

    fn run(&mut self, d: Dataset, action: Action) -> Result<Vec<PartitionOutput>> {
        let stage = Stage {
            id: self.next_stage,
            target: d.id,
            lineage: self.lineage.slice(d.id)?,
            action,
        };
        self.next_stage += 1;
        let preferred: Vec<Option<u32>> = (0..d.num_partitions)
            .map(|p| self.preferred(d.id, p))
            .collect();
        let assignment = assign_partitions(&self.executor.workers(), d.num_partitions, &preferred);
        let result = self.executor.run_stage(&stage, &assignment)?;
        for (&ds, node) in &stage.lineage {
            if !node.is_view() {
                self.locations.insert(ds, result.placement.clone());
            }
        }
        Ok(result.outputs)
    }

    pub fn collect(&mut self, d: Dataset) -> Result<Vec<Record>> {
        Ok(self.collect_partitions(d)?.into_iter().flatten().collect())
    }

    pub fn collect_partitions(&mut self, d: Dataset) -> Result<Vec<Vec<Record>>> {
        self.run(d, Action::Collect)?
            .into_iter()
            .map(|o| match o {
                PartitionOutput::Records(r) => Ok(r),
                other => Err(Error::Job(format!("collect returned {other:?}"))),
            })
            .collect()
    }

    /// Materialize every block of `d`; returns the total record count.
    pub fn count(&mut self, d: Dataset) -> Result<usize> {
        self.run(d, Action::Count)?
            .into_iter()
            .map(|o| match o {
                PartitionOutput::Count(c) => Ok(c),
                other => Err(Error::Job(format!("count returned {other:?}"))),
            })
            .sum()
    }

    pub fn reduce(&mut self, d: Dataset, map: MapSpec, combine: &str) -> Result<Record> {
        self.registry.zero(combine)?;
        let values = self
            .run(
                d,
                Action::Reduce {
                    map,
                    combine: combine.to_string(),
                },
            )?
            .into_iter()
            .map(|o| match o {
                PartitionOutput::Value(v) => Ok(v),
                other => Err(Error::Job(format!("reduce returned {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        compute::tree_combine(&self.registry, combine, values)
    }

    pub fn broadcast(&mut self, value: Record) -> Result<BroadcastId> {
        let id = self.next_broadcast;
        self.next_broadcast += 1;
        self.executor.broadcast(id, Arc::new(value))?;
        Ok(id)
    }

    pub fn release(&mut self, id: BroadcastId) -> Result<()> {
        self.executor.release(id)
    }

    /// Materialize `d`, pin its blocks at the driver and (unless disabled)
    /// re-root it as a source. Returns the records per partition.
    pub fn checkpoint(&mut self, d: Dataset) -> Result<Vec<Vec<Record>>> {
        let parts = self.collect_partitions(d)?;
        if self.truncate_lineage {
            for (p, block) in parts.iter().enumerate() {
                self.sources.insert((d.id, p), Arc::new(block.clone()));
            }
            self.lineage
                .make_source(d.id, parts.iter().map(Vec::len).collect())?;
        }
        Ok(parts)
    }

    /// Forget every dataset that is not `keep` or one of its ancestors.
    pub fn retain(&mut self, keep: &[Dataset]) -> Result<()> {
        let ids: Vec<DatasetId> = keep.iter().map(|d| d.id).collect();
        let dead = self.lineage.retain_ancestors_of(&ids)?;
        if dead.is_empty() {
            return Ok(());
        }
        self.sources.remove_datasets(&dead);
        for d in &dead {
            self.locations.remove(d);
        }
        self.executor.drop_datasets(&dead)
    }

    pub fn worker_stats(&mut self) -> Result<Vec<WorkerStats>> {
        self.executor.worker_stats()
    }

    pub fn shutdown(&mut self) -> Result<()> {
        self.executor.shutdown()
    }
}

impl Drop for Context {
    fn drop(&mut self) {
        let _ = self.executor.shutdown();
    }
}
