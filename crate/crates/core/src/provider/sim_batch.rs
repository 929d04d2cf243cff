//! Simulated batch scheduler.
//!
//! Jobs wait in a FIFO queue. Each job becomes eligible after a delay drawn
//! from a seeded generator (`queue_delay_s` plus uniform jitter, scaled by
//! the partition profile) and starts no earlier than the job ahead of it.
//! Partitions with a running-job limit also wait for a free slot. Once a job
//! starts, its block's worker hosts are launched for real through the
//! channel; queue time is the only thing simulated.
//!
//! With a real clock a timer thread starts jobs as they become due; with a
//! manual clock the caller drives [`SimBatchProvider::tick`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    terminate, Block, BlockId, BlockState, BlockTable, Channel, Clock, CommandSpec, LaunchSpec, Launcher, Provider,
    ProviderError, ProviderSpec, RealClock, CANCEL_GRACE,
};

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PartitionProfile {
    pub delay_scale: f64,
    pub max_running: Option<usize>,
}

pub fn partition_profile(name: &str) -> Option<PartitionProfile> {
    match name {
        "normal" => Some(PartitionProfile {
            delay_scale: 1.0,
            max_running: None,
        }),
        "debug" => Some(PartitionProfile {
            delay_scale: 0.5,
            max_running: Some(1),
        }),
        "busy" => Some(PartitionProfile {
            delay_scale: 2.0,
            max_running: Some(2),
        }),
        _ => None,
    }
}

pub const PARTITIONS: [&str; 3] = ["normal", "debug", "busy"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimJob {
    pub job_id: String,
    pub block_id: BlockId,
    pub submit_time: f64,
    pub eligible_time: f64,
    pub start_time: Option<f64>,
    pub end_time: Option<f64>,
    pub state: BlockState,
    #[serde(skip)]
    slot: Option<usize>,
}

/// The queue model on its own, driven by explicit times.
#[derive(Debug)]
pub struct SimQueue {
    rng: ChaCha8Rng,
    delay: f64,
    jitter: f64,
    profile: PartitionProfile,
    jobs: BTreeMap<BlockId, SimJob>,
    waiting: VecDeque<BlockId>,
    /// Bounded partitions: `None` while occupied, else the time it was freed.
    slots: Vec<Option<f64>>,
    last_start: f64,
    next_job: u64,
}

impl SimQueue {
    pub fn new(delay: f64, jitter: f64, seed: u64, profile: PartitionProfile) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            delay,
            jitter,
            profile,
            jobs: BTreeMap::new(),
            waiting: VecDeque::new(),
            slots: vec![Some(f64::NEG_INFINITY); profile.max_running.unwrap_or(0)],
            last_start: f64::NEG_INFINITY,
            next_job: 1000,
        }
    }

    pub fn submit(&mut self, block: BlockId, now: f64) -> String {
        let u: f64 = self.rng.random();
        let wait = self.profile.delay_scale * (self.delay + (2.0 * u - 1.0) * self.jitter).max(0.0);
        let job_id = self.next_job.to_string();
        self.next_job += 1;
        self.jobs.insert(
            block,
            SimJob {
                job_id: job_id.clone(),
                block_id: block,
                submit_time: now,
                eligible_time: now + wait,
                start_time: None,
                end_time: None,
                state: BlockState::Pending,
                slot: None,
            },
        );
        self.waiting.push_back(block);
        job_id
    }

    /// The earliest freed slot and its release time.
    fn free_slot(&self) -> Option<(usize, f64)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Time at which the head of the queue starts, if nothing else changes.
    /// `None` when the queue is empty or blocked on a running-job limit.
    pub fn next_start(&self) -> Option<f64> {
        let head = self.waiting.front()?;
        let released = match self.profile.max_running {
            Some(_) => self.free_slot()?.1,
            None => f64::NEG_INFINITY,
        };
        Some(self.jobs[head].eligible_time.max(self.last_start).max(released))
    }

    /// Starts every job due by `now`, in queue order.
    pub fn advance_to(&mut self, now: f64) -> Vec<BlockId> {
        let mut started = Vec::new();
        while let Some(t) = self.next_start() {
            if t > now {
                break;
            }
            let id = self.waiting.pop_front().unwrap();
            let slot = if self.profile.max_running.is_some() {
                let (s, _) = self.free_slot().unwrap();
                self.slots[s] = None;
                Some(s)
            } else {
                None
            };
            let job = self.jobs.get_mut(&id).unwrap();
            job.start_time = Some(t);
            job.state = BlockState::Running;
            job.slot = slot;
            self.last_start = t;
            started.push(id);
        }
        started
    }

    fn end(&mut self, block: BlockId, now: f64, state: BlockState) {
        let Some(job) = self.jobs.get_mut(&block) else { return };
        if !job.state.is_active() {
            return;
        }
        if job.state == BlockState::Pending {
            self.waiting.retain(|b| *b != block);
        }
        if let Some(s) = job.slot.take() {
            self.slots[s] = Some(now);
        }
        job.state = state;
        job.end_time = Some(now);
    }

    pub fn cancel(&mut self, block: BlockId, now: f64) {
        self.end(block, now, BlockState::Cancelled);
    }

    /// Records a running job's end, freeing its slot.
    pub fn finish(&mut self, block: BlockId, now: f64, state: BlockState) {
        self.end(block, now, state);
    }

    pub fn job(&self, block: BlockId) -> Option<&SimJob> {
        self.jobs.get(&block)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &SimJob> {
        self.jobs.values()
    }
}

struct SimState {
    table: BlockTable,
    queue: SimQueue,
    commands: HashMap<BlockId, Vec<CommandSpec>>,
}

struct Shared {
    spec: ProviderSpec,
    channel: Arc<dyn Channel>,
    launcher: Launcher,
    clock: Arc<dyn Clock>,
    state: Mutex<SimState>,
    wake: Condvar,
    max_blocks: AtomicUsize,
    dump: Option<PathBuf>,
    stop: AtomicBool,
}

impl Shared {
    /// Advances the simulation to the current clock time. Returns the time
    /// until the next queued job is due.
    fn tick(&self, state: &mut SimState) -> Option<f64> {
        let now = self.clock.now();
        let mut changed = false;
        for (id, end) in state.table.refresh(now) {
            state.queue.finish(id, now, end);
            changed = true;
        }
        for id in state.queue.advance_to(now) {
            changed = true;
            let commands = state.commands.remove(&id).unwrap_or_default();
            if let Err(e) = state.table.launch(id, &commands, self.channel.as_ref(), now) {
                log::warn!("block {id} failed to launch: {e}");
                state.queue.finish(id, now, BlockState::Failed);
            }
        }
        if changed {
            self.write_dump(state);
        }
        state.queue.next_start().map(|t| (t - now).max(0.0))
    }

    fn write_dump(&self, state: &SimState) {
        let Some(path) = &self.dump else { return };
        let jobs: Vec<&SimJob> = state.queue.jobs().collect();
        match serde_json::to_vec_pretty(&jobs) {
            Ok(bytes) => {
                if let Some(dir) = path.parent() {
                    let _ = std::fs::create_dir_all(dir);
                }
                if let Err(e) = std::fs::write(path, bytes) {
                    log::warn!("cannot write {}: {e}", path.display());
                }
            }
            Err(e) => log::warn!("cannot encode queue dump: {e}"),
        }
    }
}

/// Batch provider with a simulated queue in front of local launches.
pub struct SimBatchProvider {
    shared: Arc<Shared>,
    timer: Mutex<Option<JoinHandle<()>>>,
}

const MAX_TIMER_SLEEP: Duration = Duration::from_millis(50);

impl SimBatchProvider {
    pub fn new(spec: ProviderSpec, channel: Arc<dyn Channel>, dump: Option<PathBuf>) -> Result<Self, ProviderError> {
        Self::with_clock(spec, channel, Arc::new(RealClock::new()), dump)
    }

    pub fn with_clock(
        spec: ProviderSpec,
        channel: Arc<dyn Channel>,
        clock: Arc<dyn Clock>,
        dump: Option<PathBuf>,
    ) -> Result<Self, ProviderError> {
        let profile = partition_profile(&spec.partition)
            .ok_or_else(|| ProviderError::UnknownPartition(spec.partition.clone()))?;
        let queue = SimQueue::new(spec.queue_delay_s, spec.queue_delay_jitter_s, spec.seed, profile);
        let real = clock.is_real();
        let shared = Arc::new(Shared {
            launcher: Launcher::new(spec.launcher),
            max_blocks: AtomicUsize::new(spec.max_blocks),
            spec,
            channel,
            clock,
            state: Mutex::new(SimState {
                table: BlockTable::new(),
                queue,
                commands: HashMap::new(),
            }),
            wake: Condvar::new(),
            dump,
            stop: AtomicBool::new(false),
        });
        let timer = if real {
            let s = shared.clone();
            Some(
                thread::Builder::new()
                    .name("sim-batch-timer".into())
                    .spawn(move || run_timer(s))
                    .map_err(ProviderError::Channel)?,
            )
        } else {
            None
        };
        Ok(Self {
            shared,
            timer: Mutex::new(timer),
        })
    }

    /// Advances the simulation to the clock's current time.
    pub fn tick(&self) {
        let mut state = self.shared.state.lock().unwrap();
        self.shared.tick(&mut state);
    }

    pub fn jobs(&self) -> Vec<SimJob> {
        self.shared.state.lock().unwrap().queue.jobs().cloned().collect()
    }
}

fn run_timer(shared: Arc<Shared>) {
    let mut state = shared.state.lock().unwrap();
    while !shared.stop.load(Ordering::SeqCst) {
        let due = shared.tick(&mut state);
        let sleep = due
            .map(Duration::from_secs_f64)
            .unwrap_or(MAX_TIMER_SLEEP)
            .clamp(Duration::from_millis(1), MAX_TIMER_SLEEP);
        state = shared.wake.wait_timeout(state, sleep).unwrap().0;
    }
}

impl Provider for SimBatchProvider {
    fn spec(&self) -> &ProviderSpec {
        &self.shared.spec
    }

    fn submit_blocks(&self, n: usize, launch: &LaunchSpec) -> Result<Vec<BlockId>, ProviderError> {
        let sh = &self.shared;
        let mut state = sh.state.lock().unwrap();
        sh.tick(&mut state);
        let now = sh.clock.now();
        let active = state.table.active_count();
        let max = sh.max_blocks.load(Ordering::SeqCst);
        if active + n > max {
            return Err(ProviderError::Capacity {
                requested: n,
                active,
                max,
            });
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let st = &mut *state;
            let queue = &mut st.queue;
            let id = st.table.request(|id| queue.submit(id, now), now);
            st.table.set_state(id, BlockState::Pending, now)?;
            st.commands
                .insert(id, sh.launcher.commands(id, sh.spec.nodes_per_block, launch));
            ids.push(id);
        }
        sh.write_dump(&state);
        sh.tick(&mut state);
        sh.wake.notify_all();
        Ok(ids)
    }

    fn status(&self, ids: &[BlockId]) -> Result<Vec<BlockState>, ProviderError> {
        let mut state = self.shared.state.lock().unwrap();
        self.shared.tick(&mut state);
        ids.iter().map(|id| state.table.state(*id)).collect()
    }

    fn cancel(&self, ids: &[BlockId]) -> Result<(), ProviderError> {
        let sh = &self.shared;
        let mut procs = Vec::new();
        {
            let mut state = sh.state.lock().unwrap();
            sh.tick(&mut state);
            for id in ids {
                if !state.table.contains(*id) {
                    return Err(ProviderError::UnknownBlock(*id));
                }
            }
            let now = sh.clock.now();
            for id in ids {
                if state.table.state(*id)?.is_active() {
                    procs.extend(state.table.take_procs(*id));
                    state.table.set_state(*id, BlockState::Cancelled, now)?;
                    state.queue.cancel(*id, now);
                    state.commands.remove(id);
                }
            }
            sh.write_dump(&state);
            sh.tick(&mut state);
            sh.wake.notify_all();
        }
        terminate(procs, CANCEL_GRACE);
        Ok(())
    }

    fn blocks(&self) -> Vec<Block> {
        let mut state = self.shared.state.lock().unwrap();
        self.shared.tick(&mut state);
        state.table.snapshot()
    }

    fn max_blocks(&self) -> usize {
        self.shared.max_blocks.load(Ordering::SeqCst)
    }

    fn set_max_blocks(&self, max: usize) {
        self.shared.max_blocks.store(max, Ordering::SeqCst);
    }

    fn kill_node(&self, block: BlockId, index: u32) -> Result<(), ProviderError> {
        self.shared.state.lock().unwrap().table.kill_node(block, index)
    }

    fn close(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.wake.notify_all();
        if let Some(t) = self.timer.lock().unwrap().take() {
            let _ = t.join();
        }
    }
}

impl Drop for SimBatchProvider {
    fn drop(&mut self) {
        self.close();
    }
}
