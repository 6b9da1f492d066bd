//! Worker-side evaluation of stages: block lookup, lineage recomputation and
//! partition actions. Shared by the in-process and TCP executors.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use super::block::{BlockId, BlockManager, BlockStats, Lookup, Payload};
use super::kernel::{KernelArgs, KernelRegistry};
use super::lineage::{BroadcastId, DatasetId, LineageSlice, MapSpec, NodeKind};
use crate::dstack::Record;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Return every record of each partition.
    Collect,
    /// Materialize and return the record count of each partition.
    Count,
    /// Map each partition with `map`, then fold the outputs with `combine`.
    Reduce { map: MapSpec, combine: String },
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub id: u64,
    pub target: DatasetId,
    pub lineage: LineageSlice,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionOutput {
    Records(Vec<Record>),
    Count(usize),
    Value(Record),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerStats {
    pub worker_id: u32,
    pub cores: usize,
    pub memory_cap_bytes: Option<u64>,
    pub blocks: BlockStats,
}

/// Driver-pinned source blocks.
#[derive(Debug, Default)]
pub struct SourceStore {
    blocks: RwLock<BTreeMap<BlockId, Payload>>,
}

impl SourceStore {
    pub fn insert(&self, id: BlockId, payload: Payload) {
        self.blocks.write().unwrap().insert(id, payload);
    }

    pub fn get(&self, id: BlockId) -> Result<Payload> {
        self.blocks
            .read()
            .unwrap()
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Lineage(format!("source block {id:?} is not pinned at the driver")))
    }

    pub fn remove_datasets(&self, ids: &[DatasetId]) {
        self.blocks
            .write()
            .unwrap()
            .retain(|(d, _), _| !ids.contains(d));
    }

    pub fn len(&self) -> usize {
        self.blocks.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a worker obtains a source block it does not hold.
pub trait SourceFetch: Send + Sync {
    fn fetch(&self, id: BlockId) -> Result<Payload>;
}

impl SourceFetch for Arc<SourceStore> {
    fn fetch(&self, id: BlockId) -> Result<Payload> {
        self.get(id)
    }
}

pub struct WorkerEnv {
    pub worker_id: u32,
    pub cores: usize,
    registry: Arc<KernelRegistry>,
    blocks: Mutex<BlockManager>,
    broadcasts: RwLock<BTreeMap<BroadcastId, Arc<Record>>>,
    sources: Box<dyn SourceFetch>,
}

fn in_partition(e: Error, p: usize) -> Error {
    match e {
        Error::Numeric { message, iteration } => Error::Numeric {
            message: format!("partition {p}: {message}"),
            iteration,
        },
        e @ (Error::Lineage(_) | Error::Storage(_) | Error::Job(_)) => e,
        other => Error::Job(format!("partition {p}: {other}")),
    }
}

impl WorkerEnv {
    pub fn new(
        worker_id: u32,
        cores: usize,
        registry: Arc<KernelRegistry>,
        blocks: BlockManager,
        sources: Box<dyn SourceFetch>,
    ) -> Self {
        WorkerEnv {
            worker_id,
            cores,
            registry,
            blocks: Mutex::new(blocks),
            broadcasts: RwLock::new(BTreeMap::new()),
            sources,
        }
    }

    pub fn registry(&self) -> &KernelRegistry {
        &self.registry
    }

    pub fn put_broadcast(&self, id: BroadcastId, value: Arc<Record>) {
        self.broadcasts.write().unwrap().insert(id, value);
    }

    pub fn release_broadcast(&self, id: BroadcastId) {
        self.broadcasts.write().unwrap().remove(&id);
    }

    pub fn drop_datasets(&self, ids: &[DatasetId]) -> Result<()> {
        self.blocks.lock().unwrap().drop_datasets(ids)
    }

    pub fn with_blocks<T>(&self, f: impl FnOnce(&mut BlockManager) -> T) -> T {
        f(&mut self.blocks.lock().unwrap())
    }

    pub fn stats(&self) -> WorkerStats {
        let bm = self.blocks.lock().unwrap();
        WorkerStats {
            worker_id: self.worker_id,
            cores: self.cores,
            memory_cap_bytes: bm.config().memory_cap_bytes,
            blocks: bm.stats(),
        }
    }

    fn resolve_broadcasts(&self, ids: &[BroadcastId]) -> Result<Vec<Arc<Record>>> {
        let table = self.broadcasts.read().unwrap();
        ids.iter()
            .map(|id| {
                table
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Lineage(format!("broadcast {id} is not available")))
            })
            .collect()
    }

    fn apply(&self, spec: &MapSpec, records: &[Record]) -> Result<Vec<Record>> {
        let broadcasts = self.resolve_broadcasts(&spec.broadcasts)?;
        let args = KernelArgs {
            params: &spec.params,
            broadcasts: &broadcasts,
        };
        self.registry.apply_map(&spec.kernel, records, &args)
    }

    /// Fetch, read back or recompute one block of a dataset in `slice`.
    pub fn get_block(&self, slice: &LineageSlice, id: BlockId) -> Result<Payload> {
        let (ds, p) = id;
        let node = slice
            .get(&ds)
            .ok_or_else(|| Error::Lineage(format!("dataset {ds} missing from task lineage")))?;
        if p >= node.num_partitions {
            return Err(Error::Lineage(format!(
                "partition {p} out of range for dataset {ds}"
            )));
        }
        match &node.kind {
            NodeKind::Zip { parents } => {
                let blocks = parents
                    .iter()
                    .map(|&q| self.get_block(slice, (q, p)))
                    .collect::<Result<Vec<_>>>()?;
                zip_blocks(parents, &blocks).map(Arc::new)
            }
            NodeKind::Unbundle { parent, slot } => {
                let block = self.get_block(slice, (*parent, p))?;
                block
                    .iter()
                    .map(|r| {
                        r.get(*slot).map(|t| vec![t.clone()]).ok_or_else(|| {
                            Error::Shape(format!("unbundle slot {slot} of a {}-tuple", r.len()))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Arc::new)
            }
            NodeKind::Source | NodeKind::Map { .. } => {
                match self.blocks.lock().unwrap().get(id)? {
                    Lookup::Memory(b) | Lookup::Disk(b) => return Ok(b),
                    Lookup::Absent => {}
                }
                let payload = match &node.kind {
                    NodeKind::Source => {
                        let b = self.sources.fetch(id)?;
                        self.blocks.lock().unwrap().note_refetch(id);
                        b
                    }
                    NodeKind::Map { parent, spec } => {
                        let input = self.get_block(slice, (*parent, p))?;
                        self.blocks.lock().unwrap().note_recompute(id);
                        Arc::new(self.apply(spec, &input)?)
                    }
                    _ => unreachable!(),
                };
                self.blocks.lock().unwrap().put(id, payload.clone())?;
                Ok(payload)
            }
        }
    }

    pub fn run_partition(&self, stage: &Stage, p: usize) -> Result<PartitionOutput> {
        self.run_partition_inner(stage, p)
            .map_err(|e| in_partition(e, p))
    }

    fn run_partition_inner(&self, stage: &Stage, p: usize) -> Result<PartitionOutput> {
        let block = self.get_block(&stage.lineage, (stage.target, p))?;
        match &stage.action {
            Action::Collect => Ok(PartitionOutput::Records(block.to_vec())),
            Action::Count => Ok(PartitionOutput::Count(block.len())),
            Action::Reduce { map, combine } => {
                let mapped = self.apply(map, &block)?;
                let mut acc = self.registry.zero(combine)?;
                for r in mapped {
                    acc = self.registry.combine(combine, acc, r)?;
                }
                Ok(PartitionOutput::Value(acc))
            }
        }
    }
}

fn zip_blocks(parents: &[DatasetId], blocks: &[Payload]) -> Result<Vec<Record>> {
    let n = blocks[0].len();
    if let Some(i) = blocks.iter().position(|b| b.len() != n) {
        return Err(Error::Bundle {
            message: format!("zipped blocks hold {} and {} records", n, blocks[i].len()),
            datasets: vec![parents[0], parents[i]],
        });
    }
    Ok((0..n)
        .map(|i| {
            blocks
                .iter()
                .flat_map(|b| b[i].iter().cloned())
                .collect()
        })
        .collect())
}

/// Combine per-partition values pairwise in a fixed tree: neighbours first,
/// then neighbours of the results, so the order never depends on timing.
pub fn tree_combine(registry: &KernelRegistry, combine: &str, values: Vec<Record>) -> Result<Record> {
    let mut level = values;
    if level.is_empty() {
        return registry.zero(combine);
    }
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(registry.combine(combine, a, b)?),
                None => next.push(a),
            }
        }
        level = next;
    }
    Ok(level.pop().unwrap())
}
