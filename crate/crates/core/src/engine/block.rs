//! Per-worker block manager: logical memory accounting, LRU eviction and the
//! two persistence models.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::lineage::DatasetId;
use crate::dstack::{self, Record};
use crate::error::{Error, Result};

pub type BlockId = (DatasetId, usize);
pub type Payload = Arc<Vec<Record>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    #[default]
    MemoryOnly,
    MemoryAndDisk,
}

impl Persistence {
    pub fn code(self) -> u8 {
        match self {
            Persistence::MemoryOnly => 0,
            Persistence::MemoryAndDisk => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Persistence::MemoryOnly),
            1 => Ok(Persistence::MemoryAndDisk),
            c => Err(Error::Protocol(format!("unknown persistence code {c}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StorageConfig {
    pub mode: Persistence,
    /// `None` means unbounded.
    pub memory_cap_bytes: Option<u64>,
    pub spill_dir: PathBuf,
}

impl StorageConfig {
    pub fn unbounded() -> Self {
        StorageConfig {
            mode: Persistence::MemoryOnly,
            memory_cap_bytes: None,
            spill_dir: std::env::temp_dir().join("stackbundle-spill"),
        }
    }
}

/// Counters and gauges of one block manager.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockStats {
    pub mem_bytes: u64,
    pub disk_bytes: u64,
    pub evictions: u64,
    pub spills: u64,
    pub recomputes: u64,
}

pub fn payload_bytes(records: &[Record]) -> u64 {
    records
        .iter()
        .flat_map(|r| r.iter())
        .map(|t| t.size_bytes() as u64)
        .sum()
}

#[derive(Debug)]
struct MemEntry {
    payload: Payload,
    size: u64,
    last_used: u64,
}

#[derive(Debug)]
pub struct BlockManager {
    config: StorageConfig,
    memory: BTreeMap<BlockId, MemEntry>,
    disk: BTreeMap<BlockId, u64>,
    dropped: BTreeSet<BlockId>,
    tick: u64,
    stats: BlockStats,
}

pub enum Lookup {
    Memory(Payload),
    Disk(Payload),
    Absent,
}

impl BlockManager {
    pub fn new(config: StorageConfig) -> Self {
        BlockManager {
            config,
            memory: BTreeMap::new(),
            disk: BTreeMap::new(),
            dropped: BTreeSet::new(),
            tick: 0,
            stats: BlockStats::default(),
        }
    }

    pub fn config(&self) -> &StorageConfig {
        &self.config
    }

    pub fn set_mode(&mut self, mode: Persistence, cap: Option<u64>) {
        self.config.mode = mode;
        self.config.memory_cap_bytes = cap;
    }

    pub fn stats(&self) -> BlockStats {
        self.stats
    }

    fn spill_path(&self, id: BlockId) -> PathBuf {
        self.config.spill_dir.join(format!("{}_{}.blk", id.0, id.1))
    }

    fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.memory.contains_key(&id) || self.disk.contains_key(&id)
    }

    pub fn get(&mut self, id: BlockId) -> Result<Lookup> {
        let tick = self.next_tick();
        if let Some(e) = self.memory.get_mut(&id) {
            e.last_used = tick;
            return Ok(Lookup::Memory(e.payload.clone()));
        }
        if self.disk.contains_key(&id) {
            let path = self.spill_path(id);
            let bytes = fs::read(&path).map_err(|e| {
                Error::Storage(format!("reading spilled block {}: {e}", path.display()))
            })?;
            return Ok(Lookup::Disk(Arc::new(dstack::decode_block(&bytes)?)));
        }
        Ok(Lookup::Absent)
    }

    /// Record that `id` is about to be recomputed; counts it if this manager
    /// dropped the block earlier.
    pub fn note_recompute(&mut self, id: BlockId) {
        if self.dropped.remove(&id) {
            self.stats.recomputes += 1;
        }
    }

    /// Forget an earlier drop without counting a recompute (source refetch).
    pub fn note_refetch(&mut self, id: BlockId) {
        self.dropped.remove(&id);
    }

    pub fn put(&mut self, id: BlockId, payload: Payload) -> Result<()> {
        if self.contains(id) {
            return Ok(());
        }
        let size = payload_bytes(&payload);
        if let Some(cap) = self.config.memory_cap_bytes {
            if size > cap {
                return self.discard(id, payload);
            }
            while self.stats.mem_bytes + size > cap {
                let victim = self.lru_victim().expect("memory accounting out of sync");
                self.evict(victim)?;
            }
        }
        let last_used = self.next_tick();
        self.stats.mem_bytes += size;
        self.memory.insert(
            id,
            MemEntry {
                payload,
                size,
                last_used,
            },
        );
        Ok(())
    }

    /// Oldest block; ties go to the lowest block id.
    fn lru_victim(&self) -> Option<BlockId> {
        self.memory
            .iter()
            .min_by_key(|(id, e)| (e.last_used, **id))
            .map(|(id, _)| *id)
    }

    pub fn evict(&mut self, id: BlockId) -> Result<()> {
        let Some(entry) = self.memory.remove(&id) else {
            return Ok(());
        };
        self.stats.mem_bytes -= entry.size;
        self.stats.evictions += 1;
        self.discard(id, entry.payload)
    }

    fn discard(&mut self, id: BlockId, payload: Payload) -> Result<()> {
        match self.config.mode {
            Persistence::MemoryOnly => {
                self.dropped.insert(id);
            }
            Persistence::MemoryAndDisk => {
                let bytes = dstack::encode_block_vec(&payload)?;
                write_spill(&self.config.spill_dir, &self.spill_path(id), &bytes)?;
                self.stats.spills += 1;
                self.stats.disk_bytes += payload_bytes(&payload);
                self.disk.insert(id, payload_bytes(&payload));
            }
        }
        Ok(())
    }

    /// Drop every block of the given datasets, in memory and on disk.
    pub fn drop_datasets(&mut self, ids: &[DatasetId]) -> Result<()> {
        let doomed: BTreeSet<DatasetId> = ids.iter().copied().collect();
        let in_mem: Vec<BlockId> = self
            .memory
            .keys()
            .copied()
            .filter(|b| doomed.contains(&b.0))
            .collect();
        for b in in_mem {
            let e = self.memory.remove(&b).unwrap();
            self.stats.mem_bytes -= e.size;
        }
        let on_disk: Vec<BlockId> = self
            .disk
            .keys()
            .copied()
            .filter(|b| doomed.contains(&b.0))
            .collect();
        for b in on_disk {
            let size = self.disk.remove(&b).unwrap();
            self.stats.disk_bytes -= size;
            let path = self.spill_path(b);
            if let Err(e) = fs::remove_file(&path) {
                if e.kind() != std::io::ErrorKind::NotFound {
                    return Err(Error::Storage(format!("removing {}: {e}", path.display())));
                }
            }
        }
        self.dropped.retain(|b| !doomed.contains(&b.0));
        Ok(())
    }

    pub fn memory_blocks(&self) -> Vec<BlockId> {
        self.memory.keys().copied().collect()
    }

    pub fn disk_blocks(&self) -> Vec<BlockId> {
        self.disk.keys().copied().collect()
    }
}

fn write_spill(dir: &Path, path: &Path, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(path, bytes))
        .map_err(|e| Error::Storage(format!("spilling to {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn block(v: f64, n: usize) -> Payload {
        Arc::new(vec![vec![Tensor::filled(&[n], v)]])
    }

    fn manager(mode: Persistence, cap: u64, dir: &Path) -> BlockManager {
        BlockManager::new(StorageConfig {
            mode,
            memory_cap_bytes: Some(cap),
            spill_dir: dir.to_path_buf(),
        })
    }

    #[test]
    fn lru_eviction_under_memory_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut bm = manager(Persistence::MemoryOnly, 160, dir.path());
        bm.put((0, 0), block(1.0, 10)).unwrap();
        bm.put((0, 1), block(2.0, 10)).unwrap();
        assert!(matches!(bm.get((0, 0)).unwrap(), Lookup::Memory(_)));
        bm.put((1, 0), block(3.0, 10)).unwrap();
        assert!(matches!(bm.get((0, 1)).unwrap(), Lookup::Absent));
        assert!(bm.stats().mem_bytes <= 160);
        assert_eq!(bm.stats().evictions, 1);
        assert_eq!(bm.stats().spills, 0);
        bm.note_recompute((0, 1));
        bm.note_recompute((0, 1));
        assert_eq!(bm.stats().recomputes, 1);
    }

    #[test]
    fn spill_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut bm = manager(Persistence::MemoryAndDisk, 80, dir.path());
        let first = block(0.1 + 0.2, 10);
        bm.put((3, 1), first.clone()).unwrap();
        bm.put((3, 2), block(5.0, 10)).unwrap();
        assert!(dir.path().join("3_1.blk").exists());
        match bm.get((3, 1)).unwrap() {
            Lookup::Disk(p) => assert_eq!(*p, *first),
            _ => panic!("expected a disk hit"),
        }
        assert_eq!(bm.stats().spills, 1);
        assert_eq!(bm.stats().disk_bytes, 80);
        bm.drop_datasets(&[3]).unwrap();
        assert_eq!(bm.stats(), BlockStats { evictions: 1, spills: 1, ..Default::default() });
        assert!(!dir.path().join("3_1.blk").exists());
    }

    #[test]
    fn oversized_block_bypasses_memory() {
        let dir = tempfile::tempdir().unwrap();
        let mut bm = manager(Persistence::MemoryAndDisk, 8, dir.path());
        bm.put((0, 0), block(1.0, 2)).unwrap();
        assert_eq!(bm.stats().mem_bytes, 0);
        assert!(matches!(bm.get((0, 0)).unwrap(), Lookup::Disk(_)));
    }

    #[test]
    fn lru_ties_break_on_lowest_id() {
        let mut bm = BlockManager::new(StorageConfig::unbounded());
        bm.put((2, 0), block(1.0, 1)).unwrap();
        bm.put((1, 5), block(1.0, 1)).unwrap();
        for e in bm.memory.values_mut() {
            e.last_used = 7;
        }
        assert_eq!(bm.lru_victim(), Some((1, 5)));
    }
}
