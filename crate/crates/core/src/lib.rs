//! Dataflow runtime for parallel task workflows.
//!
//! Apps (native Rust functions or shell command templates) are invoked through a
//! [`DataFlowKernel`] and immediately return an [`AppFuture`]. Futures passed as
//! arguments to later invocations become edges of a dependency graph; the kernel
//! launches each task on a configured executor once everything it depends on has
//! resolved, stages its files, and retries failed attempts within a budget.
//!
//! Execution resources come from executors: an in-process thread pool, or a
//! worker pool whose workers are separate processes started inside blocks
//! granted by a provider (the local machine or a simulated batch scheduler).

pub mod app;
pub mod config;
pub mod error;
pub mod executor;
pub mod fixture;
pub mod future;
pub mod kernel;
pub mod provider;
pub mod staging;
pub mod task;

pub use app::{define_native_app, define_shell_app, render_command, AppError, AppOptions, AppSpec, Call, ShellResult};
pub use config::{describe_options, load_config, validate_config, ConfigDocument, Finding};
pub use error::{ErrorKind, Outcome, TaskError};
pub use executor::{Completion, ExecTask, Executor, ExecutorKind, ExecutorSpec, WorkerPoolState};
pub use future::{AppFuture, DataFuture};
pub use kernel::{wait_all, DataFlowKernel, Invocation, KernelBuilder, KernelError, ShutdownMode, Transition};
pub use provider::{Block, BlockId, BlockState, ProviderKind, ProviderSpec};
pub use staging::{FileRef, Scheme, Stager};
pub use task::{scan_dependencies, substitute_futures, ArgValue, Resolution, TaskId, TaskRecord, TaskState};
