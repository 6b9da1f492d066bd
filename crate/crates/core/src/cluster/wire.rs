//! Payload codecs for every message of the cluster protocol. All integers are
//! little endian; tensors use the dstack block framing.

use crate::dstack::{self, Record};
use crate::engine::block::{BlockStats, Persistence};
use crate::engine::compute::{Action, PartitionOutput, Stage};
use crate::engine::lineage::{BroadcastId, DatasetId, LineageSlice, MapSpec, Node, NodeKind};
use crate::error::{Error, Result};

use super::frame::{Frame, Opcode};

/// Sentinel worker id in REGISTER asking the master to pick one.
pub const ASSIGN_ID: u32 = u32::MAX;
const NO_CAP: u64 = u64::MAX;

#[derive(Default)]
pub struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
        self
    }
    pub fn block(&mut self, records: &[Record]) -> Result<&mut Self> {
        dstack::encode_block(records, &mut self.0)?;
        Ok(self)
    }
    pub fn opt_u64(&mut self, v: Option<u64>) -> &mut Self {
        self.u64(v.unwrap_or(NO_CAP))
    }
}

pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Protocol("message payload truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Protocol("string is not UTF-8".into()))
    }
    pub fn block(&mut self) -> Result<Vec<Record>> {
        let (records, used) = dstack::decode_block_prefix(&self.buf[self.pos..])?;
        self.pos += used;
        Ok(records)
    }
    pub fn opt_u64(&mut self) -> Result<Option<u64>> {
        let v = self.u64()?;
        Ok((v != NO_CAP).then_some(v))
    }
    /// Bounded element count for a list whose items take at least `min_item` bytes.
    pub fn len(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item.max(1)) > self.buf.len() - self.pos {
            return Err(Error::Protocol("list length exceeds payload".into()));
        }
        Ok(n)
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} unexpected trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Register {
    pub worker_id: u32,
    pub cores: u32,
    pub memory_cap: Option<u64>,
    pub registry_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterAck {
    pub worker_id: u32,
    pub mode: Persistence,
    /// Overrides the worker's own cap when set.
    pub memory_cap: Option<u64>,
    pub heartbeat_ms: u32,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: u64,
    pub stage: Stage,
    pub partitions: Vec<usize>,
    pub drops: Vec<DatasetId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub task_id: u64,
    pub outcome: std::result::Result<Vec<(usize, PartitionOutput)>, RemoteError>,
    pub stats: BlockStats,
}

/// An error that crossed the wire; keeps the category needed for exit codes.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteError {
    pub kind: u8,
    pub message: String,
}

impl RemoteError {
    pub fn from_error(e: &Error) -> Self {
        let (kind, message) = match e {
            Error::Numeric { message, .. } => (1, message.clone()),
            Error::Lineage(m) => (2, m.clone()),
            Error::Storage(m) => (3, m.clone()),
            other => (0, other.to_string()),
        };
        RemoteError { kind, message }
    }

    pub fn into_error(self, worker: u32) -> Error {
        let msg = format!("worker {worker}: {}", self.message);
        match self.kind {
            1 => Error::numeric(msg),
            2 => Error::Lineage(msg),
            3 => Error::Storage(msg),
            _ => Error::Job(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(Register),
    RegisterAck(RegisterAck),
    Task(Box<Task>),
    TaskResult(TaskResult),
    BlockGet { request_id: u64, dataset: DatasetId, partition: usize },
    BlockData { request_id: u64, block: std::result::Result<Vec<Record>, String> },
    Broadcast { id: BroadcastId, value: Option<Record> },
    Heartbeat,
    Shutdown,
    Error(String),
}

impl PartialEq for Task {
    fn eq(&self, other: &Self) -> bool {
        self.task_id == other.task_id
            && self.partitions == other.partitions
            && self.drops == other.drops
            && self.stage.id == other.stage.id
            && self.stage.target == other.stage.target
            && self.stage.lineage == other.stage.lineage
            && self.stage.action == other.stage.action
    }
}

fn map_spec(e: &mut Enc, s: &MapSpec) {
    e.str(&s.kernel);
    e.u32(s.params.len() as u32);
    for &p in &s.params {
        e.f64(p);
    }
    e.u32(s.broadcasts.len() as u32);
    for &b in &s.broadcasts {
        e.u64(b);
    }
}

fn read_map_spec(d: &mut Dec) -> Result<MapSpec> {
    let kernel = d.str()?;
    let n = d.len(8)?;
    let params = (0..n).map(|_| d.f64()).collect::<Result<_>>()?;
    let n = d.len(8)?;
    let broadcasts = (0..n).map(|_| d.u64()).collect::<Result<_>>()?;
    Ok(MapSpec {
        kernel,
        params,
        broadcasts,
    })
}

fn lineage(e: &mut Enc, slice: &LineageSlice) {
    e.u32(slice.len() as u32);
    for (&id, node) in slice {
        e.u64(id).u64(node.num_partitions as u64);
        match &node.counts {
            Some(c) => {
                e.u8(1).u32(c.len() as u32);
                for &n in c {
                    e.u64(n as u64);
                }
            }
            None => {
                e.u8(0);
            }
        }
        match &node.kind {
            NodeKind::Source => {
                e.u8(0);
            }
            NodeKind::Map { parent, spec } => {
                e.u8(1).u64(*parent);
                map_spec(e, spec);
            }
            NodeKind::Zip { parents } => {
                e.u8(2).u32(parents.len() as u32);
                for &p in parents {
                    e.u64(p);
                }
            }
            NodeKind::Unbundle { parent, slot } => {
                e.u8(3).u64(*parent).u32(*slot as u32);
            }
        }
    }
}

fn read_lineage(d: &mut Dec) -> Result<LineageSlice> {
    let n = d.len(18)?;
    let mut slice = LineageSlice::new();
    for _ in 0..n {
        let id = d.u64()?;
        let num_partitions = d.u64()? as usize;
        let counts = match d.u8()? {
            0 => None,
            1 => {
                let k = d.len(8)?;
                Some((0..k).map(|_| d.u64().map(|v| v as usize)).collect::<Result<_>>()?)
            }
            t => return Err(Error::Protocol(format!("bad counts tag {t}"))),
        };
        let kind = match d.u8()? {
            0 => NodeKind::Source,
            1 => NodeKind::Map {
                parent: d.u64()?,
                spec: read_map_spec(d)?,
            },
            2 => {
                let k = d.len(8)?;
                NodeKind::Zip {
                    parents: (0..k).map(|_| d.u64()).collect::<Result<_>>()?,
                }
            }
            3 => NodeKind::Unbundle {
                parent: d.u64()?,
                slot: d.u32()? as usize,
            },
            t => return Err(Error::Protocol(format!("bad lineage node tag {t}"))),
        };
        slice.insert(
            id,
            Node {
                kind,
                num_partitions,
                counts,
            },
        );
    }
    Ok(slice)
}

fn stats(e: &mut Enc, s: &BlockStats) {
    e.u64(s.mem_bytes)
        .u64(s.disk_bytes)
        .u64(s.evictions)
        .u64(s.spills)
        .u64(s.recomputes);
}

fn read_stats(d: &mut Dec) -> Result<BlockStats> {
    Ok(BlockStats {
        mem_bytes: d.u64()?,
        disk_bytes: d.u64()?,
        evictions: d.u64()?,
        spills: d.u64()?,
        recomputes: d.u64()?,
    })
}

impl Message {
    pub fn opcode(&self) -> Opcode {
        match self {
            Message::Register(_) => Opcode::Register,
            Message::RegisterAck(_) => Opcode::RegisterAck,
            Message::Task(_) => Opcode::Task,
            Message::TaskResult(_) => Opcode::TaskResult,
            Message::BlockGet { .. } => Opcode::BlockGet,
            Message::BlockData { .. } => Opcode::BlockData,
            Message::Broadcast { .. } => Opcode::Broadcast,
            Message::Heartbeat => Opcode::Heartbeat,
            Message::Shutdown => Opcode::Shutdown,
            Message::Error(_) => Opcode::Error,
        }
    }

    pub fn encode(&self) -> Result<Frame> {
        let mut e = Enc::default();
        match self {
            Message::Register(r) => {
                e.u32(r.worker_id)
                    .u32(r.cores)
                    .opt_u64(r.memory_cap)
                    .str(&r.registry_hash);
            }
            Message::RegisterAck(a) => {
                e.u32(a.worker_id)
                    .u8(a.mode.code())
                    .opt_u64(a.memory_cap)
                    .u32(a.heartbeat_ms);
            }
            Message::Task(t) => {
                e.u64(t.task_id).u64(t.stage.id).u64(t.stage.target);
                lineage(&mut e, &t.stage.lineage);
                match &t.stage.action {
                    Action::Collect => {
                        e.u8(0);
                    }
                    Action::Count => {
                        e.u8(1);
                    }
                    Action::Reduce { map, combine } => {
                        e.u8(2);
                        map_spec(&mut e, map);
                        e.str(combine);
                    }
                }
                e.u32(t.partitions.len() as u32);
                for &p in &t.partitions {
                    e.u32(p as u32);
                }
                e.u32(t.drops.len() as u32);
                for &d in &t.drops {
                    e.u64(d);
                }
            }
            Message::TaskResult(r) => {
                e.u64(r.task_id);
                stats(&mut e, &r.stats);
                match &r.outcome {
                    Ok(outputs) => {
                        e.u8(0).u32(outputs.len() as u32);
                        for (p, out) in outputs {
                            e.u32(*p as u32);
                            match out {
                                PartitionOutput::Records(rs) => {
                                    e.u8(0).block(rs)?;
                                }
                                PartitionOutput::Count(c) => {
                                    e.u8(1).u64(*c as u64);
                                }
                                PartitionOutput::Value(v) => {
                                    e.u8(2).block(std::slice::from_ref(v))?;
                                }
                            }
                        }
                    }
                    Err(err) => {
                        e.u8(1).u8(err.kind).str(&err.message);
                    }
                }
            }
            Message::BlockGet {
                request_id,
                dataset,
                partition,
            } => {
                e.u64(*request_id).u64(*dataset).u32(*partition as u32);
            }
            Message::BlockData { request_id, block } => {
                e.u64(*request_id);
                match block {
                    Ok(b) => {
                        e.u8(0).block(b)?;
                    }
                    Err(m) => {
                        e.u8(1).str(m);
                    }
                }
            }
            Message::Broadcast { id, value } => {
                e.u64(*id);
                match value {
                    Some(v) => {
                        e.u8(0).block(std::slice::from_ref(v))?;
                    }
                    None => {
                        e.u8(1);
                    }
                }
            }
            Message::Heartbeat | Message::Shutdown => {}
            Message::Error(m) => {
                e.0.extend_from_slice(m.as_bytes());
            }
        }
        Ok(Frame::new(self.opcode(), e.0))
    }

    pub fn decode(frame: &Frame) -> Result<Message> {
        let op = frame.op()?;
        let mut d = Dec::new(&frame.payload);
        let msg = match op {
            Opcode::Register => Message::Register(Register {
                worker_id: d.u32()?,
                cores: d.u32()?,
                memory_cap: d.opt_u64()?,
                registry_hash: d.str()?,
            }),
            Opcode::RegisterAck => Message::RegisterAck(RegisterAck {
                worker_id: d.u32()?,
                mode: Persistence::from_code(d.u8()?)?,
                memory_cap: d.opt_u64()?,
                heartbeat_ms: d.u32()?,
            }),
            Opcode::Task => {
                let task_id = d.u64()?;
                let stage_id = d.u64()?;
                let target = d.u64()?;
                let lineage = read_lineage(&mut d)?;
                let action = match d.u8()? {
                    0 => Action::Collect,
                    1 => Action::Count,
                    2 => Action::Reduce {
                        map: read_map_spec(&mut d)?,
                        combine: d.str()?,
                    },
                    t => return Err(Error::Protocol(format!("bad action tag {t}"))),
                };
                let n = d.len(4)?;
                let partitions = (0..n)
                    .map(|_| d.u32().map(|p| p as usize))
                    .collect::<Result<_>>()?;
                let n = d.len(8)?;
                let drops = (0..n).map(|_| d.u64()).collect::<Result<_>>()?;
                Message::Task(Box::new(Task {
                    task_id,
                    stage: Stage {
                        id: stage_id,
                        target,
                        lineage,
                        action,
                    },
                    partitions,
                    drops,
                }))
            }
            Opcode::TaskResult => {
                let task_id = d.u64()?;
                let stats = read_stats(&mut d)?;
                let outcome = match d.u8()? {
                    0 => {
                        let n = d.len(5)?;
                        let mut outs = Vec::with_capacity(n);
                        for _ in 0..n {
                            let p = d.u32()? as usize;
                            let out = match d.u8()? {
                                0 => PartitionOutput::Records(d.block()?),
                                1 => PartitionOutput::Count(d.u64()? as usize),
                                2 => {
                                    let mut b = d.block()?;
                                    if b.len() != 1 {
                                        return Err(Error::Protocol(
                                            "reduce value must be one record".into(),
                                        ));
                                    }
                                    PartitionOutput::Value(b.pop().unwrap())
                                }
                                t => return Err(Error::Protocol(format!("bad output tag {t}"))),
                            };
                            outs.push((p, out));
                        }
                        Ok(outs)
                    }
                    1 => Err(RemoteError {
                        kind: d.u8()?,
                        message: d.str()?,
                    }),
                    t => return Err(Error::Protocol(format!("bad status {t}"))),
                };
                Message::TaskResult(TaskResult {
                    task_id,
                    outcome,
                    stats,
                })
            }
            Opcode::BlockGet => Message::BlockGet {
                request_id: d.u64()?,
                dataset: d.u64()?,
                partition: d.u32()? as usize,
            },
            Opcode::BlockData => {
                let request_id = d.u64()?;
                let block = match d.u8()? {
                    0 => Ok(d.block()?),
                    1 => Err(d.str()?),
                    t => return Err(Error::Protocol(format!("bad status {t}"))),
                };
                Message::BlockData { request_id, block }
            }
            Opcode::Broadcast => {
                let id = d.u64()?;
                let value = match d.u8()? {
                    0 => {
                        let mut b = d.block()?;
                        if b.len() != 1 {
                            return Err(Error::Protocol("broadcast must be one record".into()));
                        }
                        b.pop()
                    }
                    1 => None,
                    t => return Err(Error::Protocol(format!("bad broadcast tag {t}"))),
                };
                Message::Broadcast { id, value }
            }
            Opcode::Heartbeat => Message::Heartbeat,
            Opcode::Shutdown => Message::Shutdown,
            Opcode::Error => {
                let m = String::from_utf8_lossy(&frame.payload).into_owned();
                d.take(frame.payload.len())?;
                Message::Error(m)
            }
        };
        d.finish()?;
        Ok(msg)
    }
}
