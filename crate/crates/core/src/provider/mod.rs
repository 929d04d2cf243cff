//! Resource providers hand out blocks: units of allocation holding one or
//! more nodes, each running a worker host started by a launcher through a
//! channel.
//!
//! Two providers exist: [`LocalProvider`] starts blocks immediately on this
//! machine; [`SimBatchProvider`] emulates a batch scheduler queue with a
//! seeded delay model before starting them the same way.

mod channel;
mod clock;
mod launcher;
mod local;
pub mod sim_batch;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::process::Child;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use channel::{Channel, ChannelKind, CommandOutput, CommandSpec, LocalChannel};
pub use clock::{Clock, ManualClock, RealClock};
pub use launcher::{LaunchSpec, Launcher, LauncherKind};
pub use local::LocalProvider;
pub use sim_batch::{partition_profile, PartitionProfile, SimBatchProvider, SimJob, SimQueue};

/// Grace period between asking worker hosts to stop and killing them.
pub const CANCEL_GRACE: Duration = Duration::from_secs(5);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockState {
    Requested,
    Pending,
    Running,
    Cancelled,
    Failed,
    Done,
}

impl BlockState {
    pub fn is_active(self) -> bool {
        matches!(self, BlockState::Requested | BlockState::Pending | BlockState::Running)
    }

    pub fn can_transition_to(self, next: BlockState) -> bool {
        use BlockState::*;
        matches!(
            (self, next),
            (Requested, Pending)
                | (Pending, Running)
                | (Pending, Cancelled)
                | (Pending, Failed)
                | (Running, Done)
                | (Running, Cancelled)
                | (Running, Failed)
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Local,
    SimBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub nodes_per_block: usize,
    pub init_blocks: usize,
    pub min_blocks: usize,
    pub max_blocks: usize,
    /// Named queue profile of the simulated scheduler.
    pub partition: String,
    pub launcher: LauncherKind,
    pub channel: ChannelKind,
    /// Mean simulated queue wait per job.
    pub queue_delay_s: f64,
    /// Half-width of the uniform spread around the mean wait.
    pub queue_delay_jitter_s: f64,
    pub seed: u64,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Local,
            nodes_per_block: 1,
            init_blocks: 1,
            min_blocks: 0,
            max_blocks: 1,
            partition: "normal".into(),
            launcher: LauncherKind::PerNode,
            channel: ChannelKind::Local,
            queue_delay_s: 0.0,
            queue_delay_jitter_s: 0.0,
            seed: 0,
        }
    }
}

impl ProviderSpec {
    pub fn local(nodes_per_block: usize) -> Self {
        Self {
            nodes_per_block,
            ..Self::default()
        }
    }

    pub fn sim_batch(nodes_per_block: usize, queue_delay_s: f64, seed: u64) -> Self {
        Self {
            kind: ProviderKind::SimBatch,
            nodes_per_block,
            queue_delay_s,
            seed,
            ..Self::default()
        }
    }

    pub fn blocks(mut self, init: usize, min: usize, max: usize) -> Self {
        self.init_blocks = init;
        self.min_blocks = min;
        self.max_blocks = max;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub index: u32,
    pub pid: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub state: BlockState,
    pub job_id: String,
    pub nodes: Vec<NodeInfo>,
    /// Every state entered, with the provider clock time in seconds.
    pub history: Vec<(BlockState, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("requesting {requested} block(s) would exceed max_blocks={max} ({active} active)")]
    Capacity {
        requested: usize,
        active: usize,
        max: usize,
    },
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("block {0} has no node {1}")]
    UnknownNode(BlockId, u32),
    #[error("channel failure: {0}")]
    Channel(#[from] std::io::Error),
    #[error("unknown partition '{0}'")]
    UnknownPartition(String),
}

pub trait Provider: Send + Sync {
    fn spec(&self) -> &ProviderSpec;

    /// Requests `n` blocks at once; either all are requested or none.
    fn submit_blocks(&self, n: usize, launch: &LaunchSpec) -> Result<Vec<BlockId>, ProviderError>;

    fn submit(&self, launch: &LaunchSpec) -> Result<BlockId, ProviderError> {
        Ok(self.submit_blocks(1, launch)?[0])
    }

    fn status(&self, ids: &[BlockId]) -> Result<Vec<BlockState>, ProviderError>;

    /// Cancels blocks: queued jobs never start; running ones have their
    /// worker hosts terminated within [`CANCEL_GRACE`].
    fn cancel(&self, ids: &[BlockId]) -> Result<(), ProviderError>;

    /// Snapshot of every block ever requested.
    fn blocks(&self) -> Vec<Block>;

    fn active_blocks(&self) -> usize {
        self.blocks().iter().filter(|b| b.state.is_active()).count()
    }

    fn max_blocks(&self) -> usize;

    fn set_max_blocks(&self, max: usize);

    /// Kills one worker host outright, as a node failure would.
    fn kill_node(&self, block: BlockId, index: u32) -> Result<(), ProviderError>;

    /// Stops background activity. Blocks are not cancelled by this call.
    fn close(&self) {}
}

struct NodeProc {
    index: u32,
    child: Child,
}

struct Entry {
    block: Block,
    procs: Vec<NodeProc>,
}

/// Block bookkeeping shared by the providers.
pub(crate) struct BlockTable {
    next: u64,
    entries: BTreeMap<BlockId, Entry>,
}

impl BlockTable {
    pub(crate) fn new() -> Self {
        Self {
            next: 0,
            entries: BTreeMap::new(),
        }
    }

    pub(crate) fn request(&mut self, job_id: impl FnOnce(BlockId) -> String, now: f64) -> BlockId {
        let id = BlockId(self.next);
        self.next += 1;
        self.entries.insert(
            id,
            Entry {
                block: Block {
                    id,
                    state: BlockState::Requested,
                    job_id: job_id(id),
                    nodes: Vec::new(),
                    history: vec![(BlockState::Requested, now)],
                },
                procs: Vec::new(),
            },
        );
        id
    }

    pub(crate) fn set_state(&mut self, id: BlockId, next: BlockState, now: f64) -> Result<(), ProviderError> {
        let e = self.entries.get_mut(&id).ok_or(ProviderError::UnknownBlock(id))?;
        if e.block.state == next {
            return Ok(());
        }
        debug_assert!(
            e.block.state.can_transition_to(next),
            "block {id}: {:?} -> {next:?}",
            e.block.state
        );
        if e.block.state.can_transition_to(next) {
            e.block.state = next;
            e.block.history.push((next, now));
        }
        Ok(())
    }

    pub(crate) fn state(&self, id: BlockId) -> Result<BlockState, ProviderError> {
        self.entries
            .get(&id)
            .map(|e| e.block.state)
            .ok_or(ProviderError::UnknownBlock(id))
    }

    pub(crate) fn contains(&self, id: BlockId) -> bool {
        self.entries.contains_key(&id)
    }

    pub(crate) fn active_count(&self) -> usize {
        self.entries.values().filter(|e| e.block.state.is_active()).count()
    }

    /// Starts the block's worker hosts and marks it running.
    pub(crate) fn launch(
        &mut self,
        id: BlockId,
        commands: &[CommandSpec],
        channel: &dyn Channel,
        now: f64,
    ) -> Result<(), ProviderError> {
        let mut procs = Vec::new();
        for (i, cmd) in commands.iter().enumerate() {
            match channel.spawn(cmd) {
                Ok(child) => procs.push(NodeProc { index: i as u32, child }),
                Err(e) => {
                    for mut p in procs {
                        let _ = p.child.kill();
                        let _ = p.child.wait();
                    }
                    self.set_state(id, BlockState::Failed, now)?;
                    return Err(ProviderError::Channel(e));
                }
            }
        }
        let e = self.entries.get_mut(&id).ok_or(ProviderError::UnknownBlock(id))?;
        e.block.nodes = procs
            .iter()
            .map(|p| NodeInfo {
                index: p.index,
                pid: Some(p.child.id()),
            })
            .collect();
        e.procs = procs;
        self.set_state(id, BlockState::Running, now)
    }

    /// Notices running blocks whose worker hosts have all exited.
    pub(crate) fn refresh(&mut self, now: f64) -> Vec<(BlockId, BlockState)> {
        let mut ended = Vec::new();
        for (id, e) in self.entries.iter_mut() {
            if e.block.state != BlockState::Running || e.procs.is_empty() {
                continue;
            }
            let mut all_exited = true;
            let mut all_ok = true;
            for p in e.procs.iter_mut() {
                match p.child.try_wait() {
                    Ok(Some(status)) => all_ok &= status.success(),
                    _ => all_exited = false,
                }
            }
            if all_exited {
                let next = if all_ok { BlockState::Done } else { BlockState::Failed };
                e.block.state = next;
                e.block.history.push((next, now));
                e.procs.clear();
                ended.push((*id, next));
            }
        }
        ended
    }

    /// Detaches the processes of a block so they can be stopped without
    /// holding the table.
    pub(crate) fn take_procs(&mut self, id: BlockId) -> Vec<Child> {
        self.entries
            .get_mut(&id)
            .map(|e| std::mem::take(&mut e.procs).into_iter().map(|p| p.child).collect())
            .unwrap_or_default()
    }

    pub(crate) fn kill_node(&mut self, id: BlockId, index: u32) -> Result<(), ProviderError> {
        let e = self.entries.get_mut(&id).ok_or(ProviderError::UnknownBlock(id))?;
        let p = e
            .procs
            .iter_mut()
            .find(|p| p.index == index)
            .ok_or(ProviderError::UnknownNode(id, index))?;
        let _ = p.child.kill();
        let _ = p.child.wait();
        Ok(())
    }

    pub(crate) fn snapshot(&self) -> Vec<Block> {
        self.entries.values().map(|e| e.block.clone()).collect()
    }
}

/// Asks each process to terminate, waits up to `grace`, then kills the rest.
pub(crate) fn terminate(mut procs: Vec<Child>, grace: Duration) {
    if procs.is_empty() {
        return;
    }
    for p in procs.iter_mut() {
        if let Ok(None) = p.try_wait() {
            send_term(p);
        }
    }
    let deadline = Instant::now() + grace;
    loop {
        procs.retain_mut(|p| !matches!(p.try_wait(), Ok(Some(_))));
        if procs.is_empty() || Instant::now() >= deadline {
            break;
        }
        thread::sleep(Duration::from_millis(10));
    }
    for mut p in procs {
        let _ = p.kill();
        let _ = p.wait();
    }
}

#[cfg(unix)]
fn send_term(child: &Child) {
    // SAFETY: plain kill(2) on a pid we spawned and have not yet reaped.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
}

#[cfg(not(unix))]
fn send_term(_child: &Child) {}

pub(crate) fn worker_log(dir: &Option<PathBuf>, block: BlockId, index: usize) -> Option<PathBuf> {
    dir.as_ref().map(|d| d.join(format!("block_{block}_node_{index}.log")))
}
