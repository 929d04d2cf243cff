use std::sync::Mutex;
use std::thread::{self, JoinHandle};

use crossbeam_channel::{unbounded, Sender};

use super::{Completion, ExecTask, Executor, ExecutorError};
use crate::app::AppRegistry;

struct Running {
    tx: Sender<ExecTask>,
    threads: Vec<JoinHandle<()>>,
}

/// Fixed-size thread pool in the kernel's process, FIFO dispatch.
pub struct InProcessExecutor {
    label: String,
    max_workers: usize,
    registry: AppRegistry,
    running: Mutex<Option<Running>>,
}

impl InProcessExecutor {
    pub fn new(label: impl Into<String>, max_workers: usize) -> Self {
        Self {
            label: label.into(),
            max_workers: max_workers.max(1),
            registry: AppRegistry::builtins(),
            running: Mutex::new(None),
        }
    }

    pub fn max_workers(&self) -> usize {
        self.max_workers
    }
}

impl Executor for InProcessExecutor {
    fn label(&self) -> &str {
        &self.label
    }

    fn start(&self, sink: Sender<Completion>) -> Result<(), ExecutorError> {
        let mut running = self.running.lock().unwrap();
        if running.is_some() {
            return Ok(());
        }
        let (tx, rx) = unbounded::<ExecTask>();
        let threads = (0..self.max_workers)
            .map(|i| {
                let rx = rx.clone();
                let sink = sink.clone();
                let registry = self.registry.clone();
                thread::Builder::new()
                    .name(format!("{}-worker-{i}", self.label))
                    .spawn(move || {
                        for task in rx {
                            let outcome = task.run(&registry);
                            if sink.send(Completion { task: task.id, outcome }).is_err() {
                                break;
                            }
                        }
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        *running = Some(Running { tx, threads });
        Ok(())
    }

    fn execute(&self, task: ExecTask) -> Result<(), ExecutorError> {
        let running = self.running.lock().unwrap();
        let r = running
            .as_ref()
            .ok_or_else(|| ExecutorError::NotStarted(self.label.clone()))?;
        r.tx.send(task).map_err(|_| ExecutorError::Down(self.label.clone()))
    }

    fn shutdown(&self) {
        let running = self.running.lock().unwrap().take();
        if let Some(Running { tx, threads }) = running {
            drop(tx);
            // Workers finish what they hold; abandoned tasks keep their thread.
            for t in threads {
                if t.is_finished() {
                    let _ = t.join();
                }
            }
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
