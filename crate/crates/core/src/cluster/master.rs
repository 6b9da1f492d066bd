//! Master side of the cluster: registration, task dispatch, block service
//! for driver-pinned sources, heartbeat supervision.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::frame::{read_frame, write_frame, Opcode};
use super::wire::{Message, Register, RegisterAck, Task, TaskResult, ASSIGN_ID};
use crate::dstack::Record;
use crate::engine::block::{BlockStats, Persistence};
use crate::engine::compute::{PartitionOutput, SourceStore, Stage, WorkerStats};
use crate::engine::kernel::KernelRegistry;
use crate::engine::lineage::{BroadcastId, DatasetId};
use crate::engine::{assign_partitions, Executor, StageResult, WorkerDesc};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub expected_workers: usize,
    pub mode: Persistence,
    /// When set, replaces each worker's own memory cap.
    pub memory_cap: Option<u64>,
    pub heartbeat: Duration,
    pub heartbeat_timeout: Duration,
}

impl MasterConfig {
    pub fn new(expected_workers: usize) -> Self {
        MasterConfig {
            expected_workers,
            mode: Persistence::MemoryOnly,
            memory_cap: None,
            heartbeat: Duration::from_secs(2),
            heartbeat_timeout: Duration::from_secs(6),
        }
    }
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(w: &Writer, msg: &Message) -> Result<()> {
    let frame = msg.encode()?;
    let op = frame.op()?;
    write_frame(&mut *w.lock().unwrap(), op, &frame.payload)
}

fn send_error(w: &Writer, message: &str) {
    let _ = write_frame(&mut *w.lock().unwrap(), Opcode::Error, message.as_bytes());
}

enum Event {
    Result(u32, TaskResult),
    Lost(u32, String),
}

struct Conn {
    id: u32,
    cores: usize,
    memory_cap: Option<u64>,
    writer: Writer,
    last_seen: Arc<Mutex<Instant>>,
    alive: bool,
    stats: BlockStats,
    pending_drops: Vec<DatasetId>,
    reader: Option<JoinHandle<()>>,
}

pub struct ClusterExecutor {
    conns: Vec<Conn>,
    events: Receiver<Event>,
    sources: Arc<SourceStore>,
    config: MasterConfig,
    next_task: u64,
    duplicate_next: bool,
    closed: bool,
}

fn reader_loop(
    id: u32,
    stream: TcpStream,
    writer: Writer,
    last_seen: Arc<Mutex<Instant>>,
    sources: Arc<SourceStore>,
    events: Sender<Event>,
) {
    let mut reader = BufReader::new(stream);
    let reason = loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break "connection closed".to_string(),
            Err(e) => break e.to_string(),
        };
        *last_seen.lock().unwrap() = Instant::now();
        match Message::decode(&frame) {
            Ok(Message::TaskResult(r)) => {
                if events.send(Event::Result(id, r)).is_err() {
                    return;
                }
            }
            Ok(Message::BlockGet {
                request_id,
                dataset,
                partition,
            }) => {
                let block = sources
                    .get((dataset, partition))
                    .map(|b| b.to_vec())
                    .map_err(|e| e.to_string());
                if let Err(e) = send(&writer, &Message::BlockData { request_id, block }) {
                    break e.to_string();
                }
            }
            Ok(Message::Heartbeat) => {}
            Ok(Message::Error(m)) => warn!("worker {id} reported: {m}"),
            Ok(other) => send_error(&writer, &format!("unexpected {:?} from a worker", other.opcode())),
            Err(e) => send_error(&writer, &e.to_string()),
        }
    };
    let _ = events.send(Event::Lost(id, reason));
}

impl ClusterExecutor {
    /// Accept workers on `listener` until `config.expected_workers` have
    /// registered with a matching kernel registry hash.
    pub fn accept(listener: TcpListener, registry: &KernelRegistry, config: MasterConfig) -> Result<Self> {
        if config.expected_workers == 0 {
            return Err(Error::Config("a cluster needs at least one worker".into()));
        }
        let hash = registry.hash();
        let sources = Arc::new(SourceStore::default());
        let (tx, rx) = mpsc::channel();
        let mut conns: Vec<Conn> = Vec::new();
        let mut streams = Vec::new();
        while conns.len() < config.expected_workers {
            let (stream, peer) = listener.accept()?;
            match Self::register(stream, peer, &hash, &conns, &config) {
                Ok((conn, stream)) => {
                    info!("worker {} registered from {peer} with {} cores", conn.id, conn.cores);
                    conns.push(conn);
                    streams.push(stream);
                }
                Err(e) => warn!("refused registration from {peer}: {e}"),
            }
        }
        for (conn, stream) in conns.iter_mut().zip(streams) {
            let (id, writer, seen, src, tx) = (
                conn.id,
                conn.writer.clone(),
                conn.last_seen.clone(),
                sources.clone(),
                tx.clone(),
            );
            *seen.lock().unwrap() = Instant::now();
            conn.reader = Some(std::thread::spawn(move || {
                reader_loop(id, stream, writer, seen, src, tx)
            }));
        }
        conns.sort_by_key(|c| c.id);
        Ok(ClusterExecutor {
            conns,
            events: rx,
            sources,
            config,
            next_task: 0,
            duplicate_next: false,
            closed: false,
        })
    }

    fn register(
        stream: TcpStream,
        peer: SocketAddr,
        hash: &str,
        conns: &[Conn],
        config: &MasterConfig,
    ) -> Result<(Conn, TcpStream)> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
        let mut reader = stream.try_clone()?;
        let refuse = |msg: String| {
            send_error(&writer, &msg);
            let _ = stream.shutdown(Shutdown::Both);
            Err(Error::Registry(msg))
        };
        let frame = read_frame(&mut reader)?
            .ok_or_else(|| Error::Protocol(format!("{peer} closed before registering")))?;
        let reg: Register = match Message::decode(&frame) {
            Ok(Message::Register(r)) => r,
            Ok(other) => return refuse(format!("expected REGISTER, got {:?}", other.opcode())),
            Err(e) => return refuse(e.to_string()),
        };
        if reg.registry_hash != hash {
            return refuse(format!(
                "kernel registry hash mismatch: worker {} vs master {hash}",
                reg.registry_hash
            ));
        }
        let used: BTreeSet<u32> = conns.iter().map(|c| c.id).collect();
        let id = if reg.worker_id == ASSIGN_ID {
            (0..).find(|i| !used.contains(i)).unwrap()
        } else {
            reg.worker_id
        };
        if used.contains(&id) {
            return refuse(format!("duplicate worker id {id}"));
        }
        if reg.cores == 0 {
            return refuse("worker declared zero cores".into());
        }
        let memory_cap = config.memory_cap.or(reg.memory_cap);
        send(
            &writer,
            &Message::RegisterAck(RegisterAck {
                worker_id: id,
                mode: config.mode,
                memory_cap: config.memory_cap,
                heartbeat_ms: config.heartbeat.as_millis() as u32,
            }),
        )?;
        stream.set_read_timeout(None)?;
        Ok((
            Conn {
                id,
                cores: reg.cores as usize,
                memory_cap,
                writer,
                last_seen: Arc::new(Mutex::new(Instant::now())),
                alive: true,
                stats: BlockStats::default(),
                pending_drops: Vec::new(),
                reader: None,
            },
            stream,
        ))
    }

    /// Send the first task of the next stage twice; the duplicate's result
    /// must equal the original.
    pub fn inject_duplicate_task(&mut self) {
        self.duplicate_next = true;
    }

    pub fn alive_workers(&self) -> usize {
        self.conns.iter().filter(|c| c.alive).count()
    }

    fn mark_dead(&mut self, ci: usize, reason: &str) {
        if self.conns[ci].alive {
            warn!("worker {} lost: {reason}", self.conns[ci].id);
            self.conns[ci].alive = false;
            let _ = self.conns[ci].writer.lock().unwrap().shutdown(Shutdown::Both);
        }
    }

    fn dispatch(&mut self, ci: usize, stage: &Stage, partitions: Vec<usize>) -> Result<u64> {
        let task_id = self.next_task;
        self.next_task += 1;
        let task = Task {
            task_id,
            stage: stage.clone(),
            partitions,
            drops: std::mem::take(&mut self.conns[ci].pending_drops),
        };
        send(&self.conns[ci].writer, &Message::Task(Box::new(task)))?;
        Ok(task_id)
    }

    /// Spread `parts` over the live workers; dead targets are retried.
    fn dispatch_all(
        &mut self,
        stage: &Stage,
        plan: Vec<(usize, Vec<usize>)>,
        outstanding: &mut BTreeMap<u64, (usize, Vec<usize>)>,
    ) -> Result<()> {
        let mut queue = plan;
        while let Some((ci, parts)) = queue.pop() {
            if parts.is_empty() {
                continue;
            }
            if self.conns[ci].alive {
                match self.dispatch(ci, stage, parts.clone()) {
                    Ok(tid) => {
                        outstanding.insert(tid, (ci, parts));
                        continue;
                    }
                    Err(e) => self.mark_dead(ci, &e.to_string()),
                }
            }
            queue.extend(self.replan(&parts)?);
        }
        Ok(())
    }

    fn replan(&self, parts: &[usize]) -> Result<Vec<(usize, Vec<usize>)>> {
        let live: Vec<usize> = (0..self.conns.len()).filter(|&i| self.conns[i].alive).collect();
        if live.is_empty() {
            return Err(Error::Job("every worker was lost".into()));
        }
        let descs: Vec<WorkerDesc> = live
            .iter()
            .map(|&i| WorkerDesc {
                id: self.conns[i].id,
                cores: self.conns[i].cores,
            })
            .collect();
        let split = assign_partitions(&descs, parts.len(), &vec![None; parts.len()]);
        Ok(live
            .into_iter()
            .zip(split)
            .map(|(ci, idx)| (ci, idx.into_iter().map(|k| parts[k]).collect()))
            .collect())
    }
}

impl Executor for ClusterExecutor {
    fn workers(&self) -> Vec<WorkerDesc> {
        self.conns
            .iter()
            .filter(|c| c.alive)
            .map(|c| WorkerDesc {
                id: c.id,
                cores: c.cores,
            })
            .collect()
    }

    fn sources(&self) -> Arc<SourceStore> {
        self.sources.clone()
    }

    fn run_stage(&mut self, stage: &Stage, assignment: &[Vec<usize>]) -> Result<StageResult> {
        let n = stage.lineage[&stage.target].num_partitions;
        let live: Vec<usize> = (0..self.conns.len()).filter(|&i| self.conns[i].alive).collect();
        if live.is_empty() {
            return Err(Error::Job("no live workers".into()));
        }
        let mut outstanding = BTreeMap::new();
        let plan: Vec<(usize, Vec<usize>)> = live
            .iter()
            .copied()
            .zip(assignment.iter().cloned())
            .collect();
        let first = plan.iter().find(|(_, p)| !p.is_empty()).cloned();
        self.dispatch_all(stage, plan, &mut outstanding)?;
        let mut duplicates = BTreeSet::new();
        if std::mem::take(&mut self.duplicate_next) {
            if let Some((ci, parts)) = first {
                let tid = self.dispatch(ci, stage, parts.clone())?;
                outstanding.insert(tid, (ci, parts));
                duplicates.insert(tid);
            }
        }

        let mut outputs: Vec<Option<PartitionOutput>> = (0..n).map(|_| None).collect();
        let mut placement = vec![0u32; n];
        let tick = (self.config.heartbeat / 4).max(Duration::from_millis(10));
        while !outstanding.is_empty() {
            let mut lost = Vec::new();
            match self.events.recv_timeout(tick) {
                Ok(Event::Result(wid, r)) => {
                    let Some((ci, _)) = outstanding.remove(&r.task_id) else {
                        debug!("ignoring stale result for task {}", r.task_id);
                        continue;
                    };
                    self.conns[ci].stats = r.stats;
                    let list = r.outcome.map_err(|e| e.into_error(wid))?;
                    for (p, out) in list {
                        if p >= n {
                            return Err(Error::Protocol(format!("result for partition {p} of {n}")));
                        }
                        match &outputs[p] {
                            Some(prev) if *prev != out => {
                                return Err(Error::Job(format!(
                                    "re-executed task for partition {p} produced a different result"
                                )));
                            }
                            Some(_) => {}
                            None => {
                                outputs[p] = Some(out);
                                placement[p] = wid;
                            }
                        }
                    }
                }
                Ok(Event::Lost(wid, reason)) => {
                    if let Some(ci) = self.conns.iter().position(|c| c.id == wid) {
                        lost.push((ci, reason));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Job("all worker connections closed".into()))
                }
            }
            let now = Instant::now();
            for (ci, c) in self.conns.iter().enumerate() {
                let silent = now.duration_since(*c.last_seen.lock().unwrap());
                if c.alive && silent > self.config.heartbeat_timeout {
                    lost.push((ci, format!("no heartbeat for {silent:?}")));
                }
            }
            for (ci, reason) in lost {
                self.mark_dead(ci, &reason);
            }
            let orphaned: Vec<u64> = outstanding
                .iter()
                .filter(|(_, (ci, _))| !self.conns[*ci].alive)
                .map(|(&t, _)| t)
                .collect();
            let mut parts = Vec::new();
            for t in orphaned {
                let (_, p) = outstanding.remove(&t).unwrap();
                if !duplicates.contains(&t) {
                    parts.extend(p);
                }
            }
            if !parts.is_empty() {
                parts.sort_unstable();
                info!("re-sending {} partitions of stage {}", parts.len(), stage.id);
                let plan = self.replan(&parts)?;
                self.dispatch_all(stage, plan, &mut outstanding)?;
            }
        }
        let outputs = outputs
            .into_iter()
            .enumerate()
            .map(|(p, o)| o.ok_or_else(|| Error::Job(format!("partition {p} produced no result"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(StageResult { outputs, placement })
    }

    fn broadcast(&mut self, id: BroadcastId, value: Arc<Record>) -> Result<()> {
        let msg = Message::Broadcast {
            id,
            value: Some(value.as_ref().clone()),
        };
        for ci in 0..self.conns.len() {
            if self.conns[ci].alive {
                if let Err(e) = send(&self.conns[ci].writer, &msg) {
                    self.mark_dead(ci, &e.to_string());
                }
            }
        }
        Ok(())
    }

    fn release(&mut self, id: BroadcastId) -> Result<()> {
        let msg = Message::Broadcast { id, value: None };
        for ci in 0..self.conns.len() {
            if self.conns[ci].alive {
                if let Err(e) = send(&self.conns[ci].writer, &msg) {
                    self.mark_dead(ci, &e.to_string());
                }
            }
        }
        Ok(())
    }

    fn drop_datasets(&mut self, ids: &[DatasetId]) -> Result<()> {
        for c in &mut self.conns {
            c.pending_drops.extend_from_slice(ids);
        }
        Ok(())
    }

    fn worker_stats(&mut self) -> Result<Vec<WorkerStats>> {
        Ok(self
            .conns
            .iter()
            .map(|c| WorkerStats {
                worker_id: c.id,
                cores: c.cores,
                memory_cap_bytes: c.memory_cap,
                blocks: c.stats,
            })
            .collect())
    }

    fn shutdown(&mut self) -> Result<()> {
        if std::mem::replace(&mut self.closed, true) {
            return Ok(());
        }
        for c in &mut self.conns {
            if c.alive {
                let _ = send(&c.writer, &Message::Shutdown);
            }
        }
        for c in &mut self.conns {
            // Queued frames still reach the worker before the FIN.
            let _ = c.writer.lock().unwrap().shutdown(Shutdown::Both);
            if let Some(h) = c.reader.take() {
                let _ = h.join();
            }
            c.alive = false;
        }
        Ok(())
    }
}

impl Drop for ClusterExecutor {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}
