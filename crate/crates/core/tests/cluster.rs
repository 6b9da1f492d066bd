use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;
use stackbundle::cluster::wire::{Message, Register};
use stackbundle::cluster::{
    decode_frame, encode_frame, local_cluster, read_frame, run_worker, write_frame, ClusterExecutor,
    MasterConfig, Opcode, WorkerOptions, MAX_PAYLOAD,
};
use stackbundle::dstack;
use stackbundle::engine::{Context, KernelRegistry, LocalConfig, MapSpec};
use stackbundle::{Error, Record, Tensor};

fn registry() -> Arc<KernelRegistry> {
    let mut reg = KernelRegistry::with_builtins();
    reg.register_record("square_plus", 1, |r, a| {
        let s = a.param(0)?;
        Ok(vec![r[0].map(|v| v * v + s)])
    });
    reg.register_record("add_broadcast", 1, |r, a| Ok(vec![r[0].add(&a.broadcast(0)?[0])?]));
    Arc::new(reg)
}

fn quick(workers: usize) -> MasterConfig {
    MasterConfig {
        heartbeat: Duration::from_millis(100),
        heartbeat_timeout: Duration::from_millis(1500),
        ..MasterConfig::new(workers)
    }
}

fn data() -> Tensor {
    Tensor::new(vec![40, 5], (0..200).map(|v| (v as f64 * 0.7).sin()).collect()).unwrap()
}

fn pipeline(c: &mut Context) -> (Vec<Record>, Record) {
    let d = c.parallelize(&data(), 8).unwrap();
    let b = c.broadcast(vec![Tensor::filled(&[5], 0.5)]).unwrap();
    let m = c.map(d, MapSpec::new("square_plus").params(&[0.1])).unwrap();
    let n = c.map(m, MapSpec::new("add_broadcast").broadcasts(&[b])).unwrap();
    c.checkpoint(n).unwrap();
    c.retain(&[n]).unwrap();
    let z = c.zip(&[n, n]).unwrap();
    let u = c.unbundle(z, 1).unwrap();
    let total = c.reduce(u, MapSpec::new("identity"), "sum").unwrap();
    (c.collect(n).unwrap(), total)
}

fn local_result() -> (Vec<Record>, Record) {
    let mut c = Context::local(LocalConfig::new(2, 2), registry()).unwrap();
    pipeline(&mut c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn frames_round_trip(op_index in 0usize..10, len in 0usize..4096, seed in any::<u8>()) {
        let op = Opcode::ALL[op_index];
        let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let bytes = encode_frame(op, &payload).unwrap();
        let (frame, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(frame.op().unwrap(), op);
        prop_assert_eq!(frame.payload, payload);
    }
}

#[test]
fn frames_round_trip_at_boundary_sizes() {
    for op in Opcode::ALL {
        for len in [0usize, 1, 1 << 20] {
            let payload = vec![0xA5u8; len];
            let mut wire = Vec::new();
            write_frame(&mut wire, op, &payload).unwrap();
            let frame = read_frame(&mut wire.as_slice()).unwrap().unwrap();
            assert_eq!(frame.op().unwrap(), op);
            assert_eq!(frame.payload.len(), len);
        }
    }
    assert!(encode_frame(Opcode::Task, &vec![0u8; MAX_PAYLOAD + 1]).is_err());
}

#[test]
fn malformed_frames_are_rejected() {
    assert!(matches!(decode_frame(&[1, 0]), Err(Error::Framing(_))));
    assert!(matches!(decode_frame(&[3, 0, 0, 0, 0x03, 1]), Err(Error::Framing(_))));
    let (f, _) = decode_frame(&[0, 0, 0, 0, 0xEE]).unwrap();
    assert!(matches!(Message::decode(&f), Err(Error::Protocol(_))));
    let (f, _) = decode_frame(&[2, 0, 0, 0, 0x05, 1, 2]).unwrap();
    assert!(matches!(Message::decode(&f), Err(Error::Protocol(_))));
}

#[test]
fn mismatched_registry_is_refused() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let master = std::thread::spawn(move || ClusterExecutor::accept(listener, &registry(), quick(1)));

    let mut other = KernelRegistry::with_builtins();
    other.register_record("something_else", 1, |r, _| Ok(r.clone()));
    let bad = run_worker(WorkerOptions::new(addr.clone(), 1), Arc::new(other));
    assert!(matches!(bad, Err(Error::Registry(ref m)) if m.contains("hash")), "{bad:?}");

    // A raw client sees the ERROR opcode and then a closed connection.
    let mut raw = TcpStream::connect(&addr).unwrap();
    let reg = Message::Register(Register {
        worker_id: 0,
        cores: 1,
        memory_cap: None,
        registry_hash: "0000".into(),
    })
    .encode()
    .unwrap();
    write_frame(&mut raw, Opcode::Register, &reg.payload).unwrap();
    let reply = read_frame(&mut raw).unwrap().unwrap();
    assert_eq!(reply.op().unwrap(), Opcode::Error);
    assert_eq!(read_frame(&mut raw).unwrap(), None);

    let good = std::thread::spawn(move || run_worker(WorkerOptions::new(addr, 1), registry()));
    let mut exec = master.join().unwrap().unwrap();
    use stackbundle::engine::Executor;
    assert_eq!(exec.workers().len(), 1);
    exec.shutdown().unwrap();
    good.join().unwrap().unwrap();
}

#[test]
fn one_worker_cluster_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let (exec, handles) = local_cluster(1, 2, reg.clone(), quick(1), dir.path()).unwrap();
    let mut c = Context::new(Box::new(exec), reg);
    assert_eq!(pipeline(&mut c), local_result());
    c.shutdown().unwrap();
    for h in handles {
        h.join().unwrap().unwrap();
    }
}

#[test]
fn four_workers_share_eight_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let (exec, handles) = local_cluster(4, 1, reg.clone(), quick(4), dir.path()).unwrap();
    let mut c = Context::new(Box::new(exec), reg);
    let d = c.parallelize(&data(), 8).unwrap();
    let m = c.map(d, MapSpec::new("square_plus").params(&[0.0])).unwrap();
    c.count(m).unwrap();
    let placement = c.placement(m).unwrap();
    for w in 0..4 {
        assert_eq!(placement.iter().filter(|&&p| p == w).count(), 2);
    }
    assert_eq!(pipeline(&mut c), local_result());
    drop(c);
    for h in handles {
        h.join().unwrap().unwrap();
    }
}

#[test]
fn duplicated_task_is_harmless() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let (mut exec, handles) = local_cluster(2, 1, reg.clone(), quick(2), dir.path()).unwrap();
    exec.inject_duplicate_task();
    let mut c = Context::new(Box::new(exec), reg);
    assert_eq!(pipeline(&mut c), local_result());
    drop(c);
    for h in handles {
        h.join().unwrap().unwrap();
    }
}

#[test]
fn lost_worker_tasks_are_recomputed_elsewhere() {
    let dir = tempfile::tempdir().unwrap();
    let reg = registry();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut handles = Vec::new();
    for (id, fail) in [(0u32, None), (1u32, Some(2usize))] {
        let mut opts = WorkerOptions::new(addr.clone(), 1);
        opts.worker_id = Some(id);
        opts.fail_after_tasks = fail;
        opts.spill_dir = dir.path().to_path_buf();
        let reg = reg.clone();
        handles.push(std::thread::spawn(move || run_worker(opts, reg)));
    }
    let exec = ClusterExecutor::accept(listener, &reg, quick(2)).unwrap();
    let mut c = Context::new(Box::new(exec), reg);
    assert_eq!(pipeline(&mut c), local_result());
    assert_eq!(c.workers().len(), 1);
    drop(c);
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(results[0].is_ok());
    assert!(results[1].is_err());
}

#[test]
fn silent_worker_times_out_and_block_get_serves_sources() {
    let reg = registry();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let dir = tempfile::tempdir().unwrap();
    let mut opts = WorkerOptions::new(addr.clone(), 1);
    opts.worker_id = Some(0);
    opts.spill_dir = dir.path().to_path_buf();
    let reg2 = reg.clone();
    let real = std::thread::spawn(move || run_worker(opts, reg2));

    let hash = reg.hash();
    let fake = std::thread::spawn(move || {
        let mut s = TcpStream::connect(addr).unwrap();
        let f = Message::Register(Register {
            worker_id: 1,
            cores: 1,
            memory_cap: None,
            registry_hash: hash,
        })
        .encode()
        .unwrap();
        write_frame(&mut s, Opcode::Register, &f.payload).unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        assert_eq!(read_frame(&mut r).unwrap().unwrap().op().unwrap(), Opcode::RegisterAck);
        // Wait for a task, fetch its source block, then go silent.
        let task = loop {
            let f = read_frame(&mut r).unwrap().unwrap();
            if let Message::Task(t) = Message::decode(&f).unwrap() {
                break t;
            }
        };
        let p = task.partitions[0];
        let get = Message::BlockGet {
            request_id: 77,
            dataset: task.stage.target,
            partition: p,
        }
        .encode()
        .unwrap();
        write_frame(&mut s, Opcode::BlockGet, &get.payload).unwrap();
        let reply = loop {
            let f = read_frame(&mut r).unwrap().unwrap();
            if f.op().unwrap() == Opcode::BlockData {
                break f;
            }
        };
        let block = match Message::decode(&reply).unwrap() {
            Message::BlockData { request_id: 77, block } => block.unwrap(),
            other => panic!("unexpected {other:?}"),
        };
        // The payload is the dstack block framing of the pinned records.
        let framed = dstack::encode_block_vec(&block).unwrap();
        assert_eq!(dstack::decode_block(&framed).unwrap(), block);
        std::thread::sleep(Duration::from_secs(4));
        (p, block)
    });

    let exec = ClusterExecutor::accept(listener, &reg, quick(2)).unwrap();
    let mut c = Context::new(Box::new(exec), reg);
    let d = c.parallelize(&data(), 4).unwrap();
    let out = c.collect(d).unwrap();
    assert_eq!(out.len(), 40);
    assert_eq!(c.workers().len(), 1);
    drop(c);
    let (p, block) = fake.join().unwrap();
    let expect: Vec<Record> = (0..10).map(|i| vec![data().record(p * 10 + i).unwrap()]).collect();
    assert_eq!(block, expect);
    real.join().unwrap().unwrap();
}

#[test]
fn unreachable_master_gives_up_after_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut opts = WorkerOptions::new(format!("127.0.0.1:{port}"), 1);
    opts.retry_delay = Duration::from_millis(10);
    let started = std::time::Instant::now();
    assert!(matches!(run_worker(opts, registry()), Err(Error::Io(_))));
    assert!(started.elapsed() >= Duration::from_millis(40));
}
