//! Handles returned at invocation time.
//!
//! Both kinds are cheap to clone and may be waited on from any thread. The
//! kernel writes each slot exactly once; every later read sees that value.

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::error::{ErrorKind, Outcome, TaskError};
use crate::staging::FileRef;
use crate::task::{TaskId, TaskState};

pub(crate) struct Slot<T> {
    value: Mutex<Option<T>>,
    cv: Condvar,
}

impl<T: Clone> Slot<T> {
    pub(crate) fn new() -> Self {
        Self {
            value: Mutex::new(None),
            cv: Condvar::new(),
        }
    }

    /// Writes the value; returns false if it was already set.
    pub(crate) fn set(&self, v: T) -> bool {
        let mut guard = self.value.lock().unwrap();
        if guard.is_some() {
            return false;
        }
        *guard = Some(v);
        self.cv.notify_all();
        true
    }

    pub(crate) fn is_set(&self) -> bool {
        self.value.lock().unwrap().is_some()
    }

    pub(crate) fn get(&self) -> Option<T> {
        self.value.lock().unwrap().clone()
    }

    /// Waits until set or the deadline passes.
    pub(crate) fn wait_until(&self, deadline: Option<Instant>) -> Option<T> {
        let mut guard = self.value.lock().unwrap();
        loop {
            if let Some(v) = guard.as_ref() {
                return Some(v.clone());
            }
            match deadline {
                None => guard = self.cv.wait(guard).unwrap(),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return None;
                    }
                    guard = self.cv.wait_timeout(guard, d - now).unwrap().0;
                }
            }
        }
    }
}

pub(crate) struct FutureCell {
    pub(crate) slot: Slot<Outcome>,
    state: AtomicU8,
    submitted: Instant,
    finished: OnceLock<Instant>,
}

impl FutureCell {
    pub(crate) fn new() -> Self {
        Self {
            slot: Slot::new(),
            state: AtomicU8::new(TaskState::Pending as u8),
            submitted: Instant::now(),
            finished: OnceLock::new(),
        }
    }

    pub(crate) fn set_state(&self, s: TaskState) {
        self.state.store(s as u8, Ordering::Release);
    }

    pub(crate) fn resolve(&self, outcome: Outcome) -> bool {
        let _ = self.finished.set(Instant::now());
        self.slot.set(outcome)
    }
}

/// The future of one app invocation.
#[derive(Clone)]
pub struct AppFuture {
    id: TaskId,
    cell: Arc<FutureCell>,
    outputs: Vec<DataFuture>,
}

impl AppFuture {
    pub(crate) fn new(id: TaskId, cell: Arc<FutureCell>, outputs: Vec<DataFuture>) -> Self {
        Self { id, cell, outputs }
    }

    pub fn task_id(&self) -> TaskId {
        self.id
    }

    /// True once the task reached a terminal state. Never reverts.
    pub fn done(&self) -> bool {
        self.cell.slot.is_set()
    }

    /// Last state observed by the kernel.
    pub fn state(&self) -> TaskState {
        TaskState::from_u8(self.cell.state.load(Ordering::Acquire))
    }

    /// Blocks until the task finishes.
    pub fn result(&self) -> Outcome {
        self.cell.slot.wait_until(None).expect("unbounded wait returns a value")
    }

    /// Like [`result`](Self::result) but gives up after `timeout` with a
    /// timeout error. The task itself keeps running.
    pub fn result_timeout(&self, timeout: Duration) -> Outcome {
        self.cell
            .slot
            .wait_until(Some(Instant::now() + timeout))
            .unwrap_or_else(|| {
                Err(TaskError::new(
                    ErrorKind::Timeout,
                    format!("task {} not finished after {:?}", self.id, timeout),
                ))
            })
    }

    pub(crate) fn wait_deadline(&self, deadline: Option<Instant>) -> Option<Outcome> {
        self.cell.slot.wait_until(deadline)
    }

    /// Non-blocking peek.
    pub fn try_result(&self) -> Option<Outcome> {
        self.cell.slot.get()
    }

    pub fn outputs(&self) -> &[DataFuture] {
        &self.outputs
    }

    pub fn output(&self, index: usize) -> Option<&DataFuture> {
        self.outputs.get(index)
    }

    /// Time from submission to completion, once done.
    pub fn latency(&self) -> Option<Duration> {
        self.cell.finished.get().map(|t| t.duration_since(self.cell.submitted))
    }
}

impl fmt::Debug for AppFuture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AppFuture")
            .field("task", &self.id)
            .field("state", &self.state())
            .field("outputs", &self.outputs.len())
            .finish()
    }
}

/// Future of one declared output file of a task.
#[derive(Clone)]
pub struct DataFuture {
    producer: TaskId,
    index: usize,
    file: FileRef,
    slot: Arc<Slot<Result<FileRef, TaskError>>>,
}

impl DataFuture {
    pub(crate) fn new(producer: TaskId, index: usize, file: FileRef) -> Self {
        Self {
            producer,
            index,
            file,
            slot: Arc::new(Slot::new()),
        }
    }

    pub(crate) fn resolve(&self, value: Result<FileRef, TaskError>) -> bool {
        self.slot.set(value)
    }

    pub fn producer(&self) -> TaskId {
        self.producer
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// The file as declared at invocation.
    pub fn file(&self) -> &FileRef {
        &self.file
    }

    pub fn done(&self) -> bool {
        self.slot.is_set()
    }

    pub fn result(&self) -> Result<FileRef, TaskError> {
        self.slot.wait_until(None).expect("unbounded wait returns a value")
    }

    pub fn result_timeout(&self, timeout: Duration) -> Result<FileRef, TaskError> {
        self.slot.wait_until(Some(Instant::now() + timeout)).unwrap_or_else(|| {
            Err(TaskError::new(
                ErrorKind::Timeout,
                format!(
                    "output {} of task {} not ready after {:?}",
                    self.index, self.producer, timeout
                ),
            ))
        })
    }

    /// Staged location of the produced file; waits for the producer.
    pub fn filepath(&self) -> Result<PathBuf, TaskError> {
        let file = self.result()?;
        file.filepath()
            .map(|p| p.to_path_buf())
            .map_err(|e| TaskError::staging(e.to_string()))
    }
}

impl fmt::Debug for DataFuture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataFuture")
            .field("producer", &self.producer)
            .field("index", &self.index)
            .field("file", &self.file.source())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::ArgValue;
    use std::thread;

    #[test]
    fn done_is_monotone_and_result_memoized() {
        let cell = Arc::new(FutureCell::new());
        let fut = AppFuture::new(TaskId(0), cell.clone(), vec![]);
        assert!(!fut.done());
        assert!(fut.try_result().is_none());
        assert!(cell.resolve(Ok(ArgValue::Int(1))));
        assert!(!cell.resolve(Ok(ArgValue::Int(2))));
        assert!(fut.done());
        assert_eq!(fut.result(), Ok(ArgValue::Int(1)));
        assert_eq!(fut.result(), Ok(ArgValue::Int(1)));
        assert!(fut.latency().is_some());
    }

    #[test]
    fn timeout_returns_error() {
        let fut = AppFuture::new(TaskId(4), Arc::new(FutureCell::new()), vec![]);
        let start = Instant::now();
        let err = fut.result_timeout(Duration::from_millis(50)).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Timeout);
        assert!(start.elapsed() >= Duration::from_millis(50));
        assert!(!fut.done());
    }

    #[test]
    fn waiters_on_other_threads_wake() {
        let cell = Arc::new(FutureCell::new());
        let fut = AppFuture::new(TaskId(0), cell.clone(), vec![]);
        let waiters: Vec<_> = (0..4)
            .map(|_| {
                let f = fut.clone();
                thread::spawn(move || f.result())
            })
            .collect();
        thread::sleep(Duration::from_millis(20));
        cell.resolve(Ok(ArgValue::from("x")));
        for w in waiters {
            assert_eq!(w.join().unwrap(), Ok(ArgValue::from("x")));
        }
    }
}
