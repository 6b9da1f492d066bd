//! Worker runtime: registers with the master, executes tasks on up to `cores`
//! threads and fetches missing source blocks from the master.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{info, warn};

use super::frame::{read_frame, write_frame, Opcode};
use super::wire::{Message, Register, RemoteError, Task, TaskResult, ASSIGN_ID};
use crate::dstack::Record;
use crate::engine::block::{BlockId, BlockManager, Payload, StorageConfig};
use crate::engine::compute::{PartitionOutput, SourceFetch, WorkerEnv};
use crate::engine::kernel::KernelRegistry;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub master_addr: String,
    pub cores: usize,
    pub memory_cap: Option<u64>,
    pub spill_dir: PathBuf,
    /// Requested id; the master picks one when `None`.
    pub worker_id: Option<u32>,
    pub connect_attempts: u32,
    pub retry_delay: Duration,
    /// Test hook: drop the connection when this many tasks have arrived.
    pub fail_after_tasks: Option<usize>,
}

impl WorkerOptions {
    pub fn new(master_addr: impl Into<String>, cores: usize) -> Self {
        WorkerOptions {
            master_addr: master_addr.into(),
            cores,
            memory_cap: None,
            spill_dir: std::env::temp_dir().join("stackbundle-spill"),
            worker_id: None,
            connect_attempts: 5,
            retry_delay: Duration::from_millis(500),
            fail_after_tasks: None,
        }
    }
}

type Writer = Arc<Mutex<TcpStream>>;
type Pending = Arc<Mutex<HashMap<u64, mpsc::Sender<std::result::Result<Vec<Record>, String>>>>>;

fn send(w: &Writer, msg: &Message) -> Result<()> {
    let frame = msg.encode()?;
    write_frame(&mut *w.lock().unwrap(), frame.op()?, &frame.payload)
}

struct RemoteFetch {
    writer: Writer,
    pending: Pending,
    next: AtomicU64,
}

impl SourceFetch for RemoteFetch {
    fn fetch(&self, (dataset, partition): BlockId) -> Result<Payload> {
        let request_id = self.next.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap().insert(request_id, tx);
        send(
            &self.writer,
            &Message::BlockGet {
                request_id,
                dataset,
                partition,
            },
        )?;
        match rx.recv() {
            Ok(Ok(block)) => Ok(Arc::new(block)),
            Ok(Err(m)) => Err(Error::Lineage(m)),
            Err(_) => Err(Error::Job("connection to master lost while fetching a block".into())),
        }
    }
}

pub fn connect_with_retry(addr: &str, attempts: u32, delay: Duration) -> Result<TcpStream> {
    let mut last = None;
    for attempt in 1..=attempts.max(1) {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                warn!("connect to {addr} failed (attempt {attempt}/{attempts}): {e}");
                last = Some(e);
                if attempt < attempts {
                    std::thread::sleep(delay);
                }
            }
        }
    }
    Err(Error::Io(last.unwrap()))
}

fn run_task(env: &WorkerEnv, task: &Task) -> std::result::Result<Vec<(usize, PartitionOutput)>, RemoteError> {
    let slots: Mutex<Vec<Option<Result<PartitionOutput>>>> =
        Mutex::new(task.partitions.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..env.cores.min(task.partitions.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&p) = task.partitions.get(i) else { break };
                let out = env.run_partition(&task.stage, p);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    let mut order: Vec<(usize, Result<PartitionOutput>)> = task
        .partitions
        .iter()
        .copied()
        .zip(slots.into_inner().unwrap().into_iter().map(Option::unwrap))
        .collect();
    order.sort_by_key(|(p, _)| *p);
    order
        .into_iter()
        .map(|(p, r)| r.map(|o| (p, o)).map_err(|e| RemoteError::from_error(&e)))
        .collect()
}

/// Register with the master and serve tasks until SHUTDOWN.
pub fn run_worker(opts: WorkerOptions, registry: Arc<KernelRegistry>) -> Result<()> {
    if opts.cores == 0 {
        return Err(Error::Config("worker needs at least one core".into()));
    }
    let stream = connect_with_retry(&opts.master_addr, opts.connect_attempts, opts.retry_delay)?;
    stream.set_nodelay(true)?;
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
    let result = serve(&opts, registry, &stream, writer);
    let _ = stream.shutdown(Shutdown::Both);
    result
}

fn serve(opts: &WorkerOptions, registry: Arc<KernelRegistry>, stream: &TcpStream, writer: Writer) -> Result<()> {
    send(
        &writer,
        &Message::Register(Register {
            worker_id: opts.worker_id.unwrap_or(ASSIGN_ID),
            cores: opts.cores as u32,
            memory_cap: opts.memory_cap,
            registry_hash: registry.hash(),
        }),
    )?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let frame = read_frame(&mut reader)?
        .ok_or_else(|| Error::Protocol("master closed the connection during registration".into()))?;
    let ack = match Message::decode(&frame)? {
        Message::RegisterAck(a) => a,
        Message::Error(m) => return Err(Error::Registry(m)),
        other => {
            return Err(Error::Protocol(format!(
                "expected REGISTER_ACK, got {:?}",
                other.opcode()
            )))
        }
    };
    info!("registered as worker {}", ack.worker_id);

    let storage = StorageConfig {
        mode: ack.mode,
        memory_cap_bytes: ack.memory_cap.or(opts.memory_cap),
        spill_dir: opts.spill_dir.join(format!("worker-{}", ack.worker_id)),
    };
    let pending: Pending = Arc::default();
    let env = Arc::new(WorkerEnv::new(
        ack.worker_id,
        opts.cores,
        registry,
        BlockManager::new(storage),
        Box::new(RemoteFetch {
            writer: writer.clone(),
            pending: pending.clone(),
            next: AtomicU64::new(0),
        }),
    ));

    let stop = Arc::new(AtomicBool::new(false));
    let heartbeat = {
        let (stop, writer) = (stop.clone(), writer.clone());
        let period = Duration::from_millis(ack.heartbeat_ms.max(1) as u64);
        std::thread::spawn(move || {
            let step = period.min(Duration::from_millis(50));
            let mut waited = Duration::ZERO;
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(step);
                waited += step;
                if waited >= period {
                    waited = Duration::ZERO;
                    if send(&writer, &Message::Heartbeat).is_err() {
                        break;
                    }
                }
            }
        })
    };

    let result = serve_loop(opts, &env, &mut reader, &writer, &pending);
    stop.store(true, Ordering::SeqCst);
    pending.lock().unwrap().clear();
    let _ = stream.shutdown(Shutdown::Both);
    let _ = heartbeat.join();
    if let Err(e) = env.with_blocks(|b| {
        let all: Vec<u64> = b
            .memory_blocks()
            .into_iter()
            .chain(b.disk_blocks())
            .map(|(d, _)| d)
            .collect();
        b.drop_datasets(&all)
    }) {
        warn!("cleaning spill files: {e}");
    }
    result
}

fn serve_loop(
    opts: &WorkerOptions,
    env: &Arc<WorkerEnv>,
    reader: &mut BufReader<TcpStream>,
    writer: &Writer,
    pending: &Pending,
) -> Result<()> {
    let mut tasks_seen = 0usize;
    loop {
        let Some(frame) = read_frame(reader)? else {
            return Err(Error::Job("master closed the connection".into()));
        };
        match Message::decode(&frame) {
            Ok(Message::Task(task)) => {
                tasks_seen += 1;
                if opts.fail_after_tasks == Some(tasks_seen) {
                    return Err(Error::Job("simulated worker failure".into()));
                }
                env.drop_datasets(&task.drops)?;
                let (env, writer) = (env.clone(), writer.clone());
                std::thread::spawn(move || {
                    let outcome = run_task(&env, &task);
                    let msg = Message::TaskResult(TaskResult {
                        task_id: task.task_id,
                        outcome,
                        stats: env.stats().blocks,
                    });
                    if let Err(e) = send(&writer, &msg) {
                        warn!("sending task result: {e}");
                    }
                });
            }
            Ok(Message::Broadcast { id, value: Some(v) }) => env.put_broadcast(id, Arc::new(v)),
            Ok(Message::Broadcast { id, value: None }) => env.release_broadcast(id),
            Ok(Message::BlockData { request_id, block }) => {
                if let Some(tx) = pending.lock().unwrap().remove(&request_id) {
                    let _ = tx.send(block);
                }
            }
            Ok(Message::Shutdown) => {
                info!("worker {} shutting down", env.worker_id);
                return Ok(());
            }
            Ok(Message::Error(m)) => warn!("master reported: {m}"),
            Ok(other) => {
                let msg = format!("unexpected {:?} from the master", other.opcode());
                let _ = write_frame(&mut *writer.lock().unwrap(), Opcode::Error, msg.as_bytes());
            }
            Err(e) => {
                let _ = write_frame(&mut *writer.lock().unwrap(), Opcode::Error, e.to_string().as_bytes());
            }
        }
    }
}
