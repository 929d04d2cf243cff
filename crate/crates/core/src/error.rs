use std::fmt;

use serde::{Deserialize, Serialize};

use crate::staging::FileRef;
use crate::task::{ArgValue, TaskId};

/// Terminal result of a task: the value it produced or the reason it did not.
pub type Outcome = Result<ArgValue, TaskError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ErrorKind {
    /// The native function returned an error or panicked.
    App,
    /// A shell app exited with a nonzero status.
    ExitCode(i32),
    /// Upstream tasks failed terminally; ascending, deduplicated.
    DepFailure(Vec<TaskId>),
    MissingOutput(FileRef),
    Staging,
    Timeout,
    Cancelled,
    /// The executor or the worker hosting the attempt went away.
    ExecutorDown,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorKind::App => f.write_str("app_error"),
            ErrorKind::ExitCode(code) => write!(f, "exit_code({code})"),
            ErrorKind::DepFailure(ids) => {
                let ids: Vec<String> = ids.iter().map(|id| id.to_string()).collect();
                write!(f, "dep_failure([{}])", ids.join(", "))
            }
            ErrorKind::MissingOutput(file) => write!(f, "missing_output({})", file.source()),
            ErrorKind::Staging => f.write_str("staging_error"),
            ErrorKind::Timeout => f.write_str("timeout"),
            ErrorKind::Cancelled => f.write_str("cancelled"),
            ErrorKind::ExecutorDown => f.write_str("executor_down"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct TaskError {
    pub kind: ErrorKind,
    pub message: String,
}

impl TaskError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn app(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::App, message)
    }

    pub fn staging(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Staging, message)
    }

    pub fn executor_down(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::ExecutorDown, message)
    }

    pub fn exit_code(&self) -> Option<i32> {
        match self.kind {
            ErrorKind::ExitCode(code) => Some(code),
            _ => None,
        }
    }

    /// Whether another attempt of the same task could change the result.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self.kind,
            ErrorKind::App | ErrorKind::ExitCode(_) | ErrorKind::Staging | ErrorKind::ExecutorDown
        )
    }
}
