use std::collections::BTreeSet;
use std::io::Write;
use std::net::TcpStream;
use std::path::Path;
use std::time::{Duration, Instant};

use parflow_core::app::builtins::{self, combine_values};
use parflow_core::executor::protocol::{encode_payload, Frame, FrameKind, WorkerHello};
use parflow_core::executor::{StrategyParams, StrategyUpdate, WorkerPoolExecutor};
use parflow_core::{
    define_native_app, define_shell_app, wait_all, AppFuture, AppOptions, ArgValue, BlockId, BlockState,
    DataFlowKernel, ErrorKind, ExecutorSpec, KernelBuilder, ProviderSpec, ShellResult, ShutdownMode, WorkerPoolState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const WORKER: &str = env!("CARGO_BIN_EXE_parflow-worker");

fn pool_kernel(dir: &Path, max_workers: usize, provider: ProviderSpec) -> DataFlowKernel {
    pool_kernel_with(dir, max_workers, provider, vec![WORKER.into()], Duration::from_secs(5))
}

fn pool_kernel_with(
    dir: &Path,
    max_workers: usize,
    provider: ProviderSpec,
    command: Vec<String>,
    heartbeat: Duration,
) -> DataFlowKernel {
    KernelBuilder::new()
        .run_dir(dir)
        .executor(ExecutorSpec::worker_pool("pool", max_workers, provider))
        .worker_command(command)
        .heartbeat(heartbeat)
        .strategy(StrategyParams {
            poll_interval: Duration::from_millis(100),
            idle_timeout: Duration::from_secs(600),
        })
        .build()
        .unwrap()
}

fn pool(k: &DataFlowKernel) -> &WorkerPoolExecutor {
    k.executor("pool")
        .unwrap()
        .as_any()
        .downcast_ref::<WorkerPoolExecutor>()
        .unwrap()
}

fn wait_for(what: &str, timeout: Duration, mut cond: impl FnMut() -> bool) {
    let start = Instant::now();
    while !cond() {
        assert!(start.elapsed() < timeout, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn state(k: &DataFlowKernel) -> WorkerPoolState {
    k.pool_state("pool").unwrap()
}

fn random_dag(seed: u64, n: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = if i == 0 { 0 } else { rng.random_range(0..=3usize.min(i)) };
            let mut ps = BTreeSet::new();
            while ps.len() < k {
                ps.insert(rng.random_range(0..i));
            }
            ps.into_iter().collect()
        })
        .collect()
}

fn run_dag(k: &DataFlowKernel, parents: &[Vec<usize>]) -> Vec<i64> {
    let mut futures: Vec<AppFuture> = Vec::new();
    for (i, ps) in parents.iter().enumerate() {
        let mut args: Vec<ArgValue> = vec![(i as i64).into()];
        args.extend(ps.iter().map(|p| ArgValue::from(&futures[*p])));
        futures.push(k.call(&builtins::combine(), args).unwrap());
    }
    wait_all(&futures, Some(Duration::from_secs(60)))
        .unwrap()
        .into_iter()
        .map(|o| o.unwrap().as_int().unwrap())
        .collect()
}

#[test]
fn worker_pool_matches_in_process_results() {
    let parents = random_dag(5, 40);
    let mut oracle = Vec::new();
    for (i, ps) in parents.iter().enumerate() {
        let inputs: Vec<i64> = ps.iter().map(|p| oracle[*p]).collect();
        oracle.push(combine_values(i as i64, &inputs));
    }

    let dir = TempDir::new().unwrap();
    let threads = KernelBuilder::new()
        .run_dir(dir.path().join("threads"))
        .executor(ExecutorSpec::in_process("threads", 3))
        .build()
        .unwrap();
    assert_eq!(run_dag(&threads, &parents), oracle);

    let k = pool_kernel(&dir.path().join("pool"), 3, ProviderSpec::local(2));
    assert_eq!(run_dag(&k, &parents), oracle);

    let echo = define_shell_app("echo", "echo {0}", AppOptions::default()).unwrap();
    let r = k.call(&echo, vec!["from a worker".into()]).unwrap().result().unwrap();
    assert_eq!(
        ShellResult::from_value(&r).unwrap().stdout().unwrap(),
        "from a worker\n"
    );
    k.shutdown(ShutdownMode::Drain);
}

#[test]
fn capacity_is_blocks_times_nodes_times_workers() {
    let dir = TempDir::new().unwrap();
    let k = pool_kernel(dir.path(), 3, ProviderSpec::local(2));
    wait_for("two hosts", Duration::from_secs(10), || state(&k).connected_hosts == 2);
    let st = state(&k);
    assert_eq!(st.running_blocks(), 1);
    assert_eq!(st.capacity, 6);
    assert_eq!(st.active_workers, 6);

    let start = Instant::now();
    let futures: Vec<AppFuture> = (0..6)
        .map(|_| k.call(&builtins::pid(), vec![400.into()]).unwrap())
        .collect();
    let pids: BTreeSet<i64> = wait_all(&futures, None)
        .unwrap()
        .into_iter()
        .map(|o| o.unwrap().as_int().unwrap())
        .collect();
    assert!(start.elapsed() < Duration::from_millis(800), "{:?}", start.elapsed());
    let hosts: BTreeSet<i64> = pool(&k).connected_hosts().iter().map(|h| h.2 as i64).collect();
    assert_eq!(pids, hosts);
    assert!(!pids.contains(&(std::process::id() as i64)));
}

#[test]
fn killed_host_fails_only_its_tasks() {
    let dir = TempDir::new().unwrap();
    let k = pool_kernel(dir.path(), 1, ProviderSpec::local(2));
    wait_for("two hosts", Duration::from_secs(10), || state(&k).connected_hosts == 2);
    let a = k.call(&builtins::pid(), vec![1500.into()]).unwrap();
    let b = k.call(&builtins::pid(), vec![1500.into()]).unwrap();
    wait_for("both running", Duration::from_secs(5), || state(&k).running_tasks == 2);

    let victim = pool(&k).connected_hosts().into_iter().find(|h| h.1 == 0).unwrap();
    pool(&k).kill_worker_host(victim.0, 0).unwrap();
    let outcomes = [a.result(), b.result()];
    let failed: Vec<_> = outcomes.iter().filter_map(|o| o.as_ref().err()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].kind, ErrorKind::ExecutorDown);
    let ok = outcomes.iter().find_map(|o| o.as_ref().ok()).unwrap();
    assert_ne!(ok.as_int().unwrap(), victim.2 as i64);
    // The block keeps running on its surviving host.
    let st = state(&k);
    assert_eq!(st.connected_hosts, 1);
    assert_eq!(st.blocks[0].state, BlockState::Running);
    assert_eq!(
        k.call(&builtins::pid(), vec![0.into()]).unwrap().result().unwrap(),
        ok.clone()
    );
}

#[test]
fn lost_host_task_is_retried_elsewhere() {
    let dir = TempDir::new().unwrap();
    let k = KernelBuilder::new()
        .run_dir(dir.path())
        .retries(1)
        .executor(ExecutorSpec::worker_pool("pool", 1, ProviderSpec::local(2)))
        .worker_command(vec![WORKER.into()])
        .build()
        .unwrap();
    wait_for("two hosts", Duration::from_secs(10), || state(&k).connected_hosts == 2);
    let blocker = k.call(&builtins::pid(), vec![3000.into()]).unwrap();
    wait_for("running", Duration::from_secs(5), || state(&k).running_tasks == 1);
    let hosts = pool(&k).connected_hosts();
    // With one slot busy, the next task lands on the other host.
    let other = k
        .call(&builtins::pid(), vec![0.into()])
        .unwrap()
        .result()
        .unwrap()
        .as_int()
        .unwrap();
    let running_on = hosts.iter().find(|h| h.2 as i64 != other).unwrap();
    pool(&k).kill_worker_host(running_on.0, running_on.1).unwrap();
    // The retry runs on the surviving host.
    assert_eq!(blocker.result().unwrap().as_int().unwrap(), other);
}

#[test]
fn silent_host_is_declared_dead() {
    let dir = TempDir::new().unwrap();
    let idle = vec!["sh".into(), "-c".into(), "sleep 30".into(), "sh".into()];
    let k = pool_kernel_with(dir.path(), 1, ProviderSpec::local(1), idle, Duration::from_millis(200));
    let addr = pool(&k).listen_addr().unwrap();

    let mut fake = TcpStream::connect(addr).unwrap();
    let hello = WorkerHello {
        block_id: 0,
        host_index: 0,
        slots: 1,
        pid: 1,
    };
    let frame = Frame::new(FrameKind::Heartbeat, 0, encode_payload(&hello).unwrap());
    fake.write_all(&frame.encode()).unwrap();

    let f = k.call(&builtins::noop(), vec![]).unwrap();
    let task = Frame::read_from(&mut fake).unwrap().unwrap();
    assert_eq!(task.kind, FrameKind::Task);
    assert_eq!(task.task_id, f.task_id().0);
    let start = Instant::now();
    let e = f.result().unwrap_err();
    assert_eq!(e.kind, ErrorKind::ExecutorDown);
    assert!(e.message.contains("heartbeat"), "{e}");
    // Three missed 200 ms heartbeats, plus monitor granularity.
    assert!(start.elapsed() < Duration::from_millis(1500));
    assert_eq!(state(&k).connected_hosts, 0);
}

#[test]
fn unexpected_result_ids_are_ignored() {
    let dir = TempDir::new().unwrap();
    let idle = vec!["sh".into(), "-c".into(), "sleep 30".into(), "sh".into()];
    let k = pool_kernel_with(dir.path(), 1, ProviderSpec::local(1), idle, Duration::from_secs(5));
    let mut fake = TcpStream::connect(pool(&k).listen_addr().unwrap()).unwrap();
    let hello = WorkerHello {
        block_id: 0,
        host_index: 0,
        slots: 1,
        pid: 1,
    };
    fake.write_all(&Frame::new(FrameKind::Heartbeat, 0, encode_payload(&hello).unwrap()).encode())
        .unwrap();
    let f = k.call(&builtins::noop(), vec![]).unwrap();
    let task = Frame::read_from(&mut fake).unwrap().unwrap();
    let ok: parflow_core::Outcome = Ok(ArgValue::Int(1));
    let bogus: parflow_core::Outcome = Ok(ArgValue::Int(99));
    fake.write_all(&Frame::new(FrameKind::Result, task.task_id + 1000, encode_payload(&bogus).unwrap()).encode())
        .unwrap();
    fake.write_all(&Frame::new(FrameKind::Result, task.task_id, encode_payload(&ok).unwrap()).encode())
        .unwrap();
    // A duplicate for the finished task is dropped too.
    fake.write_all(&Frame::new(FrameKind::Result, task.task_id, encode_payload(&bogus).unwrap()).encode())
        .unwrap();
    assert_eq!(f.result().unwrap(), ArgValue::Int(1));
}

#[test]
fn scale_in_waits_for_busy_block() {
    let dir = TempDir::new().unwrap();
    let k = pool_kernel(dir.path(), 1, ProviderSpec::local(1));
    wait_for("host", Duration::from_secs(10), || state(&k).connected_hosts == 1);
    let f = k.call(&builtins::sleep_ms(), vec![800.into()]).unwrap();
    wait_for("running", Duration::from_secs(5), || state(&k).running_tasks == 1);
    pool(&k).scale_in(&[BlockId(0)]).unwrap();
    assert!(f.result().is_ok());
    wait_for("block released", Duration::from_secs(10), || {
        // Drained hosts exit cleanly, so the block may end before the cancel lands.
        state(&k)
            .blocks
            .iter()
            .all(|b| matches!(b.state, BlockState::Cancelled | BlockState::Done))
    });
    assert!(pool(&k).scale_in(&[BlockId(7)]).is_err());
}

#[test]
fn init_blocks_are_requested_at_start() {
    let dir = TempDir::new().unwrap();
    let spec = ProviderSpec::sim_batch(1, 0.0, 3).blocks(2, 0, 3);
    let k = pool_kernel(dir.path(), 1, spec);
    let st = state(&k);
    assert_eq!(st.blocks.len(), 2);
    wait_for("hosts", Duration::from_secs(10), || state(&k).connected_hosts == 2);
    assert_eq!(state(&k).running_blocks(), 2);
    assert!(dir.path().join("simqueue.json").is_file());
}

#[test]
fn queue_delay_holds_back_the_first_task() {
    let dir = TempDir::new().unwrap();
    let k = pool_kernel(dir.path(), 1, ProviderSpec::sim_batch(1, 1.0, 9));
    let start = Instant::now();
    let f = k.call(&builtins::hello(), vec![]).unwrap();
    assert_eq!(state(&k).blocks[0].state, BlockState::Pending);
    assert_eq!(f.result().unwrap(), ArgValue::from("Hello world"));
    assert!(start.elapsed() >= Duration::from_secs(1));
    k.shutdown(ShutdownMode::Drain);
    let jobs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("simqueue.json")).unwrap()).unwrap();
    let job = &jobs.as_array().unwrap()[0];
    let waited = job["start_time"].as_f64().unwrap() - job["submit_time"].as_f64().unwrap();
    assert!((waited - 1.0).abs() < 1e-9, "{waited}");
}

#[test]
fn scaling_out_on_demand_and_max_blocks_update() {
    let dir = TempDir::new().unwrap();
    let spec = ProviderSpec::local(1).blocks(0, 0, 2);
    let k = pool_kernel(dir.path(), 1, spec);
    assert!(state(&k).blocks.is_empty());
    let futures: Vec<AppFuture> = (0..4)
        .map(|_| k.call(&builtins::sleep_ms(), vec![300.into()]).unwrap())
        .collect();
    wait_all(&futures, Some(Duration::from_secs(20))).unwrap();
    let blocks = state(&k).blocks.len();
    assert!((1..=2).contains(&blocks), "{blocks}");

    k.update_strategy(&StrategyUpdate {
        max_blocks: Some(0),
        ..StrategyUpdate::default()
    });
    assert_eq!(pool(&k).provider().max_blocks(), 0);
    assert!(pool(&k).scale_out(1).is_err());
}

#[test]
fn unregistered_native_app_fails_on_workers() {
    let dir = TempDir::new().unwrap();
    let k = pool_kernel(dir.path(), 1, ProviderSpec::local(1));
    let custom = define_native_app("not_a_builtin", |_| Ok(ArgValue::Null), AppOptions::default());
    let e = k.call(&custom, vec![]).unwrap().result().unwrap_err();
    assert_eq!(e.kind, ErrorKind::App);
    assert!(e.message.contains("not_a_builtin"), "{e}");
}
