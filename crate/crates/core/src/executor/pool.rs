//! Worker-pool executor: worker hosts in separate OS processes, started in
//! provider blocks, connected back over loopback TCP.
//!
//! Tasks queue in FIFO order and go to the connected host with the most
//! free slots. Every task sent to a host is tracked in that host's in-flight
//! set; a result is accepted only if it removes the id from that set, so a
//! task completes at most once per dispatch. When a host disconnects or
//! misses three heartbeats, each of its in-flight tasks completes with an
//! `executor_down` error and the kernel decides whether to retry.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};

use super::protocol::{decode_payload, encode_payload, Frame, FrameKind, WorkerHello, MISSED_HEARTBEATS};
use super::strategy::{BlockView, PoolView, ScalingPolicy, StrategyParams};
use super::{Completion, ExecTask, Executor, ExecutorError, ExecutorSpec, StrategyUpdate, WorkerPoolState};
use crate::error::{ErrorKind, Outcome, TaskError};
use crate::provider::{
    BlockId, BlockState, Clock, LaunchSpec, Launcher, LocalChannel, LocalProvider, Provider, ProviderKind, RealClock,
    SimBatchProvider,
};
use crate::task::TaskId;

/// Monitor granularity for heartbeats and strategy ticks.
const MONITOR_TICK: Duration = Duration::from_millis(50);

#[derive(Clone)]
pub struct PoolOptions {
    pub run_dir: PathBuf,
    pub worker_command: Vec<String>,
    pub strategy: StrategyParams,
    pub heartbeat: Duration,
    /// Provider clock; real time when absent.
    pub clock: Option<Arc<dyn Clock>>,
}

struct Host {
    block: BlockId,
    index: u32,
    slots: u32,
    pid: u32,
    inflight: HashSet<TaskId>,
    tx: Sender<Frame>,
    stream: TcpStream,
    last_seen: Instant,
}

impl Host {
    fn free(&self) -> usize {
        (self.slots as usize).saturating_sub(self.inflight.len())
    }
}

#[derive(Default)]
struct BlockMark {
    idle_since: Option<f64>,
    draining: bool,
}

#[derive(Default)]
struct PoolState {
    queue: VecDeque<(TaskId, Vec<u8>)>,
    hosts: BTreeMap<u64, Host>,
    marks: HashMap<BlockId, BlockMark>,
}

struct Inner {
    label: String,
    provider: Arc<dyn Provider>,
    clock: Arc<dyn Clock>,
    heartbeat: Duration,
    min_blocks: usize,
    slots: u32,
    hosts_per_block: usize,
    state: Mutex<PoolState>,
    sink: OnceLock<Sender<Completion>>,
    strategy: RwLock<StrategyParams>,
    stopping: AtomicBool,
    wake: (Mutex<()>, Condvar),
    next_conn: AtomicU64,
}

pub struct WorkerPoolExecutor {
    inner: Arc<Inner>,
    worker_command: Vec<String>,
    log_dir: PathBuf,
    init_blocks: usize,
    listener: Mutex<Option<SocketAddr>>,
    launch: OnceLock<LaunchSpec>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    started: AtomicBool,
    stopped: AtomicBool,
}

impl WorkerPoolExecutor {
    pub fn new(spec: &ExecutorSpec, opts: PoolOptions) -> Result<Self, ExecutorError> {
        let pspec = spec
            .provider
            .clone()
            .ok_or_else(|| ExecutorError::Config(format!("executor {} has no provider", spec.label)))?;
        if opts.worker_command.is_empty() {
            return Err(ExecutorError::Config("empty worker command".into()));
        }
        let clock = opts.clock.clone().unwrap_or_else(|| Arc::new(RealClock::new()));
        let channel = Arc::new(LocalChannel);
        let hosts_per_block = Launcher::new(pspec.launcher).hosts(pspec.nodes_per_block);
        let min_blocks = pspec.min_blocks;
        let init_blocks = pspec.init_blocks;
        let provider: Arc<dyn Provider> = match pspec.kind {
            ProviderKind::Local => Arc::new(LocalProvider::with_clock(pspec, channel, clock.clone())),
            ProviderKind::SimBatch => Arc::new(SimBatchProvider::with_clock(
                pspec,
                channel,
                clock.clone(),
                Some(opts.run_dir.join("simqueue.json")),
            )?),
        };
        Ok(Self {
            inner: Arc::new(Inner {
                label: spec.label.clone(),
                provider,
                clock,
                heartbeat: opts.heartbeat,
                min_blocks,
                slots: spec.max_workers.max(1) as u32,
                hosts_per_block,
                state: Mutex::new(PoolState::default()),
                sink: OnceLock::new(),
                strategy: RwLock::new(opts.strategy),
                stopping: AtomicBool::new(false),
                wake: (Mutex::new(()), Condvar::new()),
                next_conn: AtomicU64::new(0),
            }),
            worker_command: opts.worker_command,
            log_dir: opts.run_dir.join("workers").join(&spec.label),
            init_blocks,
            listener: Mutex::new(None),
            launch: OnceLock::new(),
            threads: Mutex::new(Vec::new()),
            started: AtomicBool::new(false),
            stopped: AtomicBool::new(false),
        })
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.inner.provider
    }

    pub fn listen_addr(&self) -> Option<SocketAddr> {
        *self.listener.lock().unwrap()
    }

    /// Requests `n` more blocks now, outside the scaling policy.
    pub fn scale_out(&self, n: usize) -> Result<Vec<BlockId>, ExecutorError> {
        let launch = self
            .launch
            .get()
            .ok_or_else(|| ExecutorError::NotStarted(self.inner.label.clone()))?;
        Ok(self.inner.provider.submit_blocks(n, launch)?)
    }

    /// Drains and releases the given blocks.
    pub fn scale_in(&self, ids: &[BlockId]) -> Result<(), ExecutorError> {
        let known = self.inner.provider.blocks();
        if let Some(id) = ids.iter().find(|id| !known.iter().any(|b| b.id == **id)) {
            return Err(ExecutorError::UnknownBlock(*id));
        }
        self.inner.scale_in(ids);
        Ok(())
    }

    /// Kills one worker host process, as a node failure would.
    pub fn kill_worker_host(&self, block: BlockId, index: u32) -> Result<(), ExecutorError> {
        Ok(self.inner.provider.kill_node(block, index)?)
    }

    /// Process ids of connected worker hosts, by block and host index.
    pub fn connected_hosts(&self) -> Vec<(BlockId, u32, u32)> {
        let st = self.inner.state.lock().unwrap();
        st.hosts.values().map(|h| (h.block, h.index, h.pid)).collect()
    }
}

impl Inner {
    fn complete(&self, task: TaskId, outcome: Outcome) {
        if let Some(sink) = self.sink.get() {
            let _ = sink.send(Completion { task, outcome });
        }
    }

    /// Sends queued tasks to hosts with free slots.
    fn dispatch(&self, st: &mut PoolState) {
        while !st.queue.is_empty() {
            let draining: HashSet<BlockId> = st.marks.iter().filter(|(_, m)| m.draining).map(|(b, _)| *b).collect();
            let best = st
                .hosts
                .iter()
                .filter(|(_, h)| h.free() > 0 && !draining.contains(&h.block))
                .max_by_key(|(conn, h)| (h.free(), std::cmp::Reverse(**conn)))
                .map(|(conn, _)| *conn);
            let Some(conn) = best else { break };
            let (id, payload) = st.queue.pop_front().unwrap();
            let host = st.hosts.get_mut(&conn).unwrap();
            host.inflight.insert(id);
            if let Some(m) = st.marks.get_mut(&host.block) {
                m.idle_since = None;
            }
            // A failed send means the host is going away; its reader reports
            // the loss and fails the in-flight set.
            let _ = host.tx.send(Frame::new(FrameKind::Task, id.0, payload));
        }
    }

    fn lose_host(&self, conn: u64, why: &str) {
        let host = {
            let mut st = self.state.lock().unwrap();
            let h = st.hosts.remove(&conn);
            if h.is_some() {
                self.dispatch(&mut st);
            }
            h
        };
        let Some(host) = host else { return };
        let _ = host.stream.shutdown(Shutdown::Both);
        if !self.stopping.load(Ordering::SeqCst) {
            log::warn!(
                "{}: worker host {}/{} (pid {}) lost: {why}; failing {} task(s)",
                self.label,
                host.block,
                host.index,
                host.pid,
                host.inflight.len()
            );
        }
        for id in host.inflight {
            self.complete(
                id,
                Err(TaskError::new(
                    ErrorKind::ExecutorDown,
                    format!("worker host {}/{} lost: {why}", host.block, host.index),
                )),
            );
        }
    }

    fn serve(self: &Arc<Self>, stream: TcpStream) {
        let mut reader = match stream.try_clone() {
            Ok(r) => r,
            Err(_) => return,
        };
        let _ = stream.set_nodelay(true);
        let hello: WorkerHello = match Frame::read_from(&mut reader) {
            Ok(Some(f)) if f.kind == FrameKind::Heartbeat => match decode_payload(&f.payload) {
                Ok(h) => h,
                Err(e) => {
                    log::warn!("{}: bad worker hello: {e}", self.label);
                    return;
                }
            },
            _ => return,
        };
        if self.stopping.load(Ordering::SeqCst) {
            let _ = Frame::shutdown().write_to(&mut &stream);
            return;
        }
        let conn = self.next_conn.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = unbounded::<Frame>();
        let mut writer = match stream.try_clone() {
            Ok(w) => w,
            Err(_) => return,
        };
        let writer_thread = thread::Builder::new()
            .name(format!("{}-send-{conn}", self.label))
            .spawn(move || {
                for frame in rx {
                    if frame.write_to(&mut writer).is_err() {
                        break;
                    }
                }
            });
        if writer_thread.is_err() {
            return;
        }
        {
            let mut st = self.state.lock().unwrap();
            let block = BlockId(hello.block_id);
            st.marks.entry(block).or_default();
            st.hosts.insert(
                conn,
                Host {
                    block,
                    index: hello.host_index,
                    slots: hello.slots,
                    pid: hello.pid,
                    inflight: HashSet::new(),
                    tx,
                    stream,
                    last_seen: Instant::now(),
                },
            );
            self.dispatch(&mut st);
        }
        log::debug!(
            "{}: worker host {}/{} connected",
            self.label,
            hello.block_id,
            hello.host_index
        );

        let why = loop {
            match Frame::read_from(&mut reader) {
                Ok(Some(frame)) => {
                    let mut st = self.state.lock().unwrap();
                    let Some(host) = st.hosts.get_mut(&conn) else { return };
                    host.last_seen = Instant::now();
                    if frame.kind != FrameKind::Result {
                        continue;
                    }
                    let id = TaskId(frame.task_id);
                    if !host.inflight.remove(&id) {
                        log::warn!(
                            "{}: ignoring result for task {id} not in flight on this host",
                            self.label
                        );
                        continue;
                    }
                    let outcome: Outcome = decode_payload(&frame.payload)
                        .unwrap_or_else(|e| Err(TaskError::app(format!("undecodable result: {e}"))));
                    self.dispatch(&mut st);
                    drop(st);
                    self.complete(id, outcome);
                }
                Ok(None) => break "connection closed".to_string(),
                Err(e) => break e.to_string(),
            }
        };
        self.lose_host(conn, &why);
    }

    fn check_heartbeats(&self) {
        let limit = self.heartbeat * MISSED_HEARTBEATS;
        let dead: Vec<u64> = {
            let st = self.state.lock().unwrap();
            st.hosts
                .iter()
                .filter(|(_, h)| h.last_seen.elapsed() > limit)
                .map(|(c, _)| *c)
                .collect()
        };
        for conn in dead {
            self.lose_host(conn, "missed heartbeats");
        }
    }

    fn view(&self) -> PoolView {
        let blocks = self.provider.blocks();
        let now = self.clock.now();
        let mut st = self.state.lock().unwrap();
        let busy: HashSet<BlockId> = st
            .hosts
            .values()
            .filter(|h| !h.inflight.is_empty())
            .map(|h| h.block)
            .collect();
        let mut views = Vec::new();
        for b in blocks.iter().filter(|b| b.state.is_active()) {
            let mark = st.marks.entry(b.id).or_default();
            let is_busy = busy.contains(&b.id);
            if is_busy || b.state != BlockState::Running {
                mark.idle_since = None;
            } else if mark.idle_since.is_none() {
                mark.idle_since = Some(now);
            }
            views.push(BlockView {
                id: b.id,
                state: b.state,
                busy: is_busy,
                draining: mark.draining,
                idle_since: mark.idle_since,
            });
        }
        let active_workers = st
            .hosts
            .values()
            .filter(|h| !st.marks.get(&h.block).is_some_and(|m| m.draining))
            .map(|h| h.slots as usize)
            .sum();
        PoolView {
            queued: st.queue.len(),
            active_workers,
            min_blocks: self.min_blocks,
            max_blocks: self.provider.max_blocks(),
            blocks: views,
        }
    }

    fn scale_in(self: &Arc<Self>, ids: &[BlockId]) {
        if ids.is_empty() {
            return;
        }
        {
            let mut st = self.state.lock().unwrap();
            for id in ids {
                st.marks.entry(*id).or_default().draining = true;
            }
            for h in st.hosts.values().filter(|h| ids.contains(&h.block)) {
                let _ = h.tx.send(Frame::shutdown());
            }
        }
        let me = self.clone();
        let ids = ids.to_vec();
        let _ = thread::Builder::new()
            .name(format!("{}-release", self.label))
            .spawn(move || {
                // Hosts finish their in-flight tasks before exiting on shutdown;
                // only then is the allocation released.
                loop {
                    let connected = {
                        let st = me.state.lock().unwrap();
                        st.hosts.values().any(|h| ids.contains(&h.block))
                    };
                    if !connected || me.stopping.load(Ordering::SeqCst) {
                        break;
                    }
                    thread::sleep(MONITOR_TICK);
                }
                if let Err(e) = me.provider.cancel(&ids) {
                    log::warn!("{}: releasing blocks {ids:?}: {e}", me.label);
                }
            });
    }

    fn monitor(self: Arc<Self>, launch: LaunchSpec) {
        let mut last_poll = Instant::now();
        loop {
            {
                let (lock, cv) = &self.wake;
                let guard = lock.lock().unwrap();
                if self.stopping.load(Ordering::SeqCst) {
                    return;
                }
                let _ = cv.wait_timeout(guard, MONITOR_TICK).unwrap();
            }
            if self.stopping.load(Ordering::SeqCst) {
                return;
            }
            self.check_heartbeats();
            let params = self.strategy.read().unwrap().clone();
            if last_poll.elapsed() < params.poll_interval {
                continue;
            }
            last_poll = Instant::now();
            let view = self.view();
            let decision = ScalingPolicy::new(params).decide(&view, self.clock.now());
            if decision.scale_out > 0 {
                match self.provider.submit_blocks(decision.scale_out, &launch) {
                    Ok(ids) => log::info!("{}: requested block(s) {ids:?}", self.label),
                    Err(e) => log::debug!("{}: scale out refused: {e}", self.label),
                }
            }
            if !decision.scale_in.is_empty() {
                log::info!("{}: releasing idle block(s) {:?}", self.label, decision.scale_in);
                self.scale_in(&decision.scale_in);
            }
        }
    }
}

impl Executor for WorkerPoolExecutor {
    fn label(&self) -> &str {
        &self.inner.label
    }

    fn start(&self, sink: Sender<Completion>) -> Result<(), ExecutorError> {
        if self.started.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        let _ = self.inner.sink.set(sink);
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        *self.listener.lock().unwrap() = Some(addr);
        let launch = LaunchSpec {
            command: self.worker_command.clone(),
            addr: addr.to_string(),
            slots: self.inner.slots,
            heartbeat_ms: self.inner.heartbeat.as_millis().max(1) as u64,
            env: Vec::new(),
            log_dir: Some(self.log_dir.clone()),
        };
        let _ = self.launch.set(launch.clone());

        let mut threads = self.threads.lock().unwrap();
        let inner = self.inner.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("{}-accept", self.inner.label))
                .spawn(move || {
                    for stream in listener.incoming() {
                        if inner.stopping.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        let inner = inner.clone();
                        let _ = thread::Builder::new()
                            .name(format!("{}-recv", inner.label))
                            .spawn(move || inner.serve(stream));
                    }
                })?,
        );

        if self.init_blocks > 0 {
            self.inner.provider.submit_blocks(self.init_blocks, &launch)?;
        }
        let inner = self.inner.clone();
        threads.push(
            thread::Builder::new()
                .name(format!("{}-monitor", self.inner.label))
                .spawn(move || inner.monitor(launch))?,
        );
        Ok(())
    }

    fn execute(&self, task: ExecTask) -> Result<(), ExecutorError> {
        if !self.started.load(Ordering::SeqCst) {
            return Err(ExecutorError::NotStarted(self.inner.label.clone()));
        }
        if self.inner.stopping.load(Ordering::SeqCst) {
            return Err(ExecutorError::Down(self.inner.label.clone()));
        }
        let payload = encode_payload(&task.to_wire())
            .map_err(|e| ExecutorError::Io(io::Error::new(io::ErrorKind::InvalidData, e.to_string())))?;
        let mut st = self.inner.state.lock().unwrap();
        st.queue.push_back((task.id, payload));
        self.inner.dispatch(&mut st);
        Ok(())
    }

    fn shutdown(&self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.inner.stopping.store(true, Ordering::SeqCst);
        self.inner.wake.1.notify_all();
        {
            let mut st = self.inner.state.lock().unwrap();
            st.queue.clear();
            for h in st.hosts.values() {
                let _ = h.tx.send(Frame::shutdown());
            }
        }
        if let Some(addr) = self.listen_addr() {
            // Unblocks the acceptor.
            let _ = TcpStream::connect_timeout(&addr, Duration::from_secs(1));
        }
        for t in self.threads.lock().unwrap().drain(..) {
            let _ = t.join();
        }
        let active: Vec<BlockId> = self
            .inner
            .provider
            .blocks()
            .iter()
            .filter(|b| b.state.is_active())
            .map(|b| b.id)
            .collect();
        if !active.is_empty() {
            if let Err(e) = self.inner.provider.cancel(&active) {
                log::warn!("{}: cancelling blocks: {e}", self.inner.label);
            }
        }
        self.inner.provider.close();
        let conns: Vec<u64> = self.inner.state.lock().unwrap().hosts.keys().copied().collect();
        for conn in conns {
            self.inner.lose_host(conn, "executor shut down");
        }
    }

    fn pool_state(&self) -> Option<WorkerPoolState> {
        let blocks = self.inner.provider.blocks();
        let st = self.inner.state.lock().unwrap();
        let running_blocks = blocks.iter().filter(|b| b.state == BlockState::Running).count();
        Some(WorkerPoolState {
            queued: st.queue.len(),
            active_workers: st.hosts.values().map(|h| h.slots as usize).sum(),
            running_tasks: st.hosts.values().map(|h| h.inflight.len()).sum(),
            connected_hosts: st.hosts.len(),
            capacity: running_blocks * self.inner.hosts_per_block * self.inner.slots as usize,
            blocks,
        })
    }

    fn update_strategy(&self, update: &StrategyUpdate) {
        {
            let mut p = self.inner.strategy.write().unwrap();
            if let Some(v) = update.poll_interval {
                p.poll_interval = v;
            }
            if let Some(v) = update.idle_timeout {
                p.idle_timeout = v;
            }
        }
        if let Some(max) = update.max_blocks {
            self.inner.provider.set_max_blocks(max);
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

impl Drop for WorkerPoolExecutor {
    fn drop(&mut self) {
        self.shutdown();
    }
}
