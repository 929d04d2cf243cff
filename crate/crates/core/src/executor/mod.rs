//! Executors run fully resolved tasks and report one completion per attempt.

mod in_process;
mod pool;
pub mod protocol;
pub mod strategy;
pub mod worker;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::Sender;
use serde::{Deserialize, Serialize};

pub use in_process::InProcessExecutor;
pub use pool::{PoolOptions, WorkerPoolExecutor};
pub use strategy::{ScalingDecision, ScalingPolicy, StrategyParams};

use crate::app::{run_native, run_shell, AppRegistry, Call, NativeFn};
use crate::error::{Outcome, TaskError};
use crate::provider::{Block, BlockId, ProviderError, ProviderSpec};
use crate::staging::FileRef;
use crate::task::{ArgValue, TaskId};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    InProcess,
    WorkerPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutorSpec {
    pub label: String,
    pub kind: ExecutorKind,
    /// Worker slots per node.
    pub max_workers: usize,
    /// Recorded for worker pools; the listener always binds loopback.
    pub address: Option<String>,
    pub provider: Option<ProviderSpec>,
}

impl ExecutorSpec {
    pub fn in_process(label: impl Into<String>, max_workers: usize) -> Self {
        Self {
            label: label.into(),
            kind: ExecutorKind::InProcess,
            max_workers,
            address: None,
            provider: None,
        }
    }

    pub fn worker_pool(label: impl Into<String>, max_workers: usize, provider: ProviderSpec) -> Self {
        Self {
            label: label.into(),
            kind: ExecutorKind::WorkerPool,
            max_workers,
            address: Some("127.0.0.1".into()),
            provider: Some(provider),
        }
    }
}

/// A task ready to run: futures substituted, files staged, command rendered.
#[derive(Clone)]
pub struct ExecTask {
    pub id: TaskId,
    pub payload: Payload,
}

#[derive(Clone)]
pub enum Payload {
    Native {
        name: String,
        /// Present when the app was defined in this process.
        callable: Option<NativeFn>,
        args: Vec<ArgValue>,
        kwargs: BTreeMap<String, ArgValue>,
        outputs: Vec<FileRef>,
    },
    Shell {
        command: String,
        cwd: PathBuf,
        stdout: PathBuf,
        stderr: PathBuf,
    },
}

/// Serializable form of a task shipped to worker processes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WireTask {
    Native {
        name: String,
        args: Vec<ArgValue>,
        kwargs: BTreeMap<String, ArgValue>,
        outputs: Vec<FileRef>,
    },
    Shell {
        command: String,
        cwd: PathBuf,
        stdout: PathBuf,
        stderr: PathBuf,
    },
}

impl ExecTask {
    pub fn to_wire(&self) -> WireTask {
        match &self.payload {
            Payload::Native {
                name,
                args,
                kwargs,
                outputs,
                ..
            } => WireTask::Native {
                name: name.clone(),
                args: args.clone(),
                kwargs: kwargs.clone(),
                outputs: outputs.clone(),
            },
            Payload::Shell {
                command,
                cwd,
                stdout,
                stderr,
            } => WireTask::Shell {
                command: command.clone(),
                cwd: cwd.clone(),
                stdout: stdout.clone(),
                stderr: stderr.clone(),
            },
        }
    }

    /// Runs in the current process.
    pub fn run(&self, registry: &AppRegistry) -> Outcome {
        match &self.payload {
            Payload::Native {
                name,
                callable,
                args,
                kwargs,
                outputs,
            } => {
                let f = match callable {
                    Some(f) => f,
                    None => registry
                        .get(name)
                        .ok_or_else(|| TaskError::app(format!("no app named '{name}' is registered")))?,
                };
                run_native(f, &Call { args, kwargs, outputs })
            }
            Payload::Shell {
                command,
                cwd,
                stdout,
                stderr,
            } => run_shell(command, cwd, stdout, stderr),
        }
    }
}

impl WireTask {
    pub fn run(&self, registry: &AppRegistry) -> Outcome {
        match self {
            WireTask::Native {
                name,
                args,
                kwargs,
                outputs,
            } => {
                let f = registry.get(name).ok_or_else(|| {
                    TaskError::app(format!(
                        "app '{name}' is not available on this worker; only registered apps can run in worker processes"
                    ))
                })?;
                run_native(f, &Call { args, kwargs, outputs })
            }
            WireTask::Shell {
                command,
                cwd,
                stdout,
                stderr,
            } => run_shell(command, cwd, stdout, stderr),
        }
    }
}

/// Result of one execution attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub task: TaskId,
    pub outcome: Outcome,
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("executor {0} has not been started")]
    NotStarted(String),
    #[error("executor {0} is shut down")]
    Down(String),
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("executor configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Snapshot of a worker pool.
#[derive(Clone, Debug, Default)]
pub struct WorkerPoolState {
    pub blocks: Vec<Block>,
    /// Tasks waiting for a worker slot.
    pub queued: usize,
    /// Worker slots on connected hosts.
    pub active_workers: usize,
    /// Tasks currently executing on workers.
    pub running_tasks: usize,
    pub connected_hosts: usize,
    /// Running blocks × nodes per block × max workers.
    pub capacity: usize,
}

impl WorkerPoolState {
    pub fn running_blocks(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.state == crate::provider::BlockState::Running)
            .count()
    }
}

pub trait Executor: Send + Sync {
    fn label(&self) -> &str;

    /// Begins accepting work; completions are delivered to `sink`.
    fn start(&self, sink: Sender<Completion>) -> Result<(), ExecutorError>;

    /// Hands over a task. Exactly one completion follows for each accepted task.
    fn execute(&self, task: ExecTask) -> Result<(), ExecutorError>;

    /// Stops the executor and releases its resources.
    fn shutdown(&self);

    fn pool_state(&self) -> Option<WorkerPoolState> {
        None
    }

    fn update_strategy(&self, _update: &StrategyUpdate) {}

    fn as_any(&self) -> &dyn std::any::Any;
}

/// Runtime adjustment of scaling parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StrategyUpdate {
    pub poll_interval: Option<Duration>,
    pub idle_timeout: Option<Duration>,
    pub max_blocks: Option<usize>,
}

/// Everything an executor needs beyond its spec.
#[derive(Clone, Debug)]
pub struct ExecutorContext {
    pub run_dir: PathBuf,
    /// Command that starts a worker host; flags are appended to it.
    pub worker_command: Vec<String>,
    pub strategy: StrategyParams,
    pub heartbeat: Duration,
}

pub fn build_executor(spec: &ExecutorSpec, ctx: &ExecutorContext) -> Result<Arc<dyn Executor>, ExecutorError> {
    match spec.kind {
        ExecutorKind::InProcess => Ok(Arc::new(InProcessExecutor::new(spec.label.clone(), spec.max_workers))),
        ExecutorKind::WorkerPool => {
            let pool = WorkerPoolExecutor::new(
                spec,
                PoolOptions {
                    run_dir: ctx.run_dir.clone(),
                    worker_command: ctx.worker_command.clone(),
                    strategy: ctx.strategy.clone(),
                    heartbeat: ctx.heartbeat,
                    clock: None,
                },
            )?;
            Ok(Arc::new(pool))
        }
    }
}
