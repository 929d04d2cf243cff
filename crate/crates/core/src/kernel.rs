//! The dataflow kernel.
//!
//! `invoke` registers a task and returns its future at once. All graph
//! mutation happens on one event thread, which receives registrations,
//! executor completions, finished stagings and retry timers. A task is handed
//! to an executor only when every task it depends on has succeeded; when a
//! dependency fails for good, every transitive dependent ends `dep_failed`
//! without running.
//!
//! Each state transition is appended to `<run_dir>/kernel.log` as one
//! tab-separated line: unix time in seconds, task id, old state (`-` at
//! registration), new state, executor label.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{select, unbounded, Receiver, Sender};

use crate::app::{AppKind, AppSpec};
use crate::config::ConfigDocument;
use crate::error::{ErrorKind, Outcome, TaskError};
use crate::executor::protocol::HEARTBEAT_INTERVAL;
use crate::executor::{
    build_executor, Completion, ExecTask, Executor, ExecutorContext, ExecutorError, ExecutorSpec, Payload,
    StrategyParams, StrategyUpdate, WorkerPoolState,
};
use crate::future::{AppFuture, DataFuture, FutureCell};
use crate::staging::{FileRef, Stager};
use crate::task::{
    substitute_futures, substitute_value, ArgValue, Resolution, SubstituteError, TaskId, TaskRecord, TaskState,
};

/// Threads used for remote stage-in.
const STAGING_THREADS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("the kernel is shut down")]
    ShutDown,
    #[error("no executor labelled '{0}'")]
    UnknownExecutor(String),
    #[error("at least one executor is required")]
    NoExecutors,
    #[error("duplicate executor label '{0}'")]
    DuplicateLabel(String),
    #[error("invalid invocation: {0}")]
    Invocation(String),
    #[error("tasks {unfinished:?} did not finish in time")]
    Timeout { unfinished: Vec<TaskId> },
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ShutdownMode {
    /// Refuse new work, finish everything registered, then release resources.
    Drain,
    /// Fail unfinished tasks with a cancellation error and release resources.
    Cancel,
}

/// One recorded task state change.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub task: TaskId,
    pub from: Option<TaskState>,
    pub to: TaskState,
    pub executor: String,
    pub at: SystemTime,
}

pub type Observer = Arc<dyn Fn(&Transition) + Send + Sync>;

/// Arguments of one app invocation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Invocation {
    pub args: Vec<ArgValue>,
    pub kwargs: BTreeMap<String, ArgValue>,
    pub outputs: Vec<FileRef>,
}

impl Invocation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_args(args: Vec<ArgValue>) -> Self {
        Self {
            args,
            ..Self::default()
        }
    }

    pub fn arg(mut self, v: impl Into<ArgValue>) -> Self {
        self.args.push(v.into());
        self
    }

    pub fn kwarg(mut self, name: impl Into<String>, v: impl Into<ArgValue>) -> Self {
        self.kwargs.insert(name.into(), v.into());
        self
    }

    pub fn output(mut self, file: FileRef) -> Self {
        self.outputs.push(file);
        self
    }
}

pub struct KernelBuilder {
    run_dir: PathBuf,
    retries: u32,
    retry_delay: Duration,
    specs: Vec<ExecutorSpec>,
    instances: Vec<Arc<dyn Executor>>,
    strategy: StrategyParams,
    heartbeat: Duration,
    worker_command: Option<Vec<String>>,
    observer: Option<Observer>,
}

impl Default for KernelBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl KernelBuilder {
    pub fn new() -> Self {
        Self {
            run_dir: PathBuf::from("runinfo"),
            retries: 0,
            retry_delay: Duration::ZERO,
            specs: Vec::new(),
            instances: Vec::new(),
            strategy: StrategyParams::default(),
            heartbeat: HEARTBEAT_INTERVAL,
            worker_command: None,
            observer: None,
        }
    }

    pub fn from_config(doc: &ConfigDocument) -> Self {
        let mut b = Self::new()
            .run_dir(&doc.run_dir)
            .retries(doc.retries)
            .retry_delay(Duration::from_secs_f64(doc.retry_delay_s))
            .strategy(doc.strategy_params());
        for e in &doc.executors {
            b = b.executor(e.clone());
        }
        b
    }

    pub fn run_dir(mut self, dir: impl AsRef<Path>) -> Self {
        self.run_dir = dir.as_ref().to_path_buf();
        self
    }

    pub fn retries(mut self, n: u32) -> Self {
        self.retries = n;
        self
    }

    pub fn retry_delay(mut self, d: Duration) -> Self {
        self.retry_delay = d;
        self
    }

    pub fn executor(mut self, spec: ExecutorSpec) -> Self {
        self.specs.push(spec);
        self
    }

    /// Adds an already constructed executor, after those built from specs.
    pub fn executor_instance(mut self, ex: Arc<dyn Executor>) -> Self {
        self.instances.push(ex);
        self
    }

    pub fn strategy(mut self, params: StrategyParams) -> Self {
        self.strategy = params;
        self
    }

    pub fn heartbeat(mut self, d: Duration) -> Self {
        self.heartbeat = d;
        self
    }

    /// Command starting a worker host; pool flags are appended to it.
    pub fn worker_command(mut self, cmd: Vec<String>) -> Self {
        self.worker_command = Some(cmd);
        self
    }

    pub fn observer(mut self, f: impl Fn(&Transition) + Send + Sync + 'static) -> Self {
        self.observer = Some(Arc::new(f));
        self
    }

    pub fn build(self) -> Result<DataFlowKernel, KernelError> {
        fs::create_dir_all(&self.run_dir)?;
        let run_dir = self.run_dir.canonicalize()?;
        let ctx = ExecutorContext {
            run_dir: run_dir.clone(),
            worker_command: self.worker_command.unwrap_or_else(default_worker_command),
            strategy: self.strategy,
            heartbeat: self.heartbeat,
        };
        let mut executors: Vec<Arc<dyn Executor>> = Vec::new();
        for spec in &self.specs {
            executors.push(build_executor(spec, &ctx)?);
        }
        executors.extend(self.instances);
        if executors.is_empty() {
            return Err(KernelError::NoExecutors);
        }
        let mut seen = BTreeSet::new();
        for e in &executors {
            if !seen.insert(e.label().to_string()) {
                return Err(KernelError::DuplicateLabel(e.label().to_string()));
            }
        }

        let (done_tx, done_rx) = unbounded::<Completion>();
        for (i, e) in executors.iter().enumerate() {
            if let Err(err) = e.start(done_tx.clone()) {
                for started in &executors[..=i] {
                    started.shutdown();
                }
                return Err(err.into());
            }
        }
        let log = BufWriter::new(File::create(run_dir.join("kernel.log"))?);
        let (events_tx, events_rx) = unbounded::<Event>();
        let counter = Arc::new(Counter::default());
        let stager = Arc::new(Stager::new(&run_dir));

        let (stage_tx, stage_rx) = unbounded::<StageJob>();
        let stagers = (0..STAGING_THREADS)
            .map(|i| {
                let rx = stage_rx.clone();
                thread::Builder::new().name(format!("stage-in-{i}")).spawn(move || {
                    for job in rx {
                        job();
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut by_label = HashMap::new();
        for e in &executors {
            by_label.insert(e.label().to_string(), e.clone());
        }
        let engine = Engine {
            nodes: HashMap::new(),
            resolved: HashMap::new(),
            executors: by_label,
            stager: stager.clone(),
            run_dir: run_dir.clone(),
            retry_delay: self.retry_delay,
            events: events_tx.clone(),
            stage_tx,
            counter: counter.clone(),
            log,
            observer: self.observer,
        };
        let handle = thread::Builder::new()
            .name("dataflow-kernel".into())
            .spawn(move || engine.run(events_rx, done_rx))?;

        Ok(DataFlowKernel {
            inner: Arc::new(Inner {
                default_label: executors[0].label().to_string(),
                executors,
                events: events_tx,
                counter,
                next_id: AtomicU64::new(0),
                retries: self.retries,
                run_dir,
                stager,
                event_thread: Mutex::new(Some(handle)),
                staging_threads: Mutex::new(stagers),
                shut_down: Mutex::new(false),
            }),
        })
    }
}

/// Worker host command used when none is configured: `PARFLOW_WORKER_BIN`,
/// else a `parflow-worker` next to (or one level above) this executable,
/// else `parflow-worker` on the search path.
pub fn default_worker_command() -> Vec<String> {
    if let Ok(bin) = std::env::var("PARFLOW_WORKER_BIN") {
        return vec![bin];
    }
    if let Ok(exe) = std::env::current_exe() {
        for dir in exe.ancestors().skip(1).take(2) {
            let candidate = dir.join("parflow-worker");
            if candidate.is_file() {
                return vec![candidate.to_string_lossy().into_owned()];
            }
        }
    }
    vec!["parflow-worker".into()]
}

#[derive(Default)]
struct Counter {
    state: Mutex<CounterState>,
    cv: Condvar,
}

#[derive(Default)]
struct CounterState {
    closed: bool,
    outstanding: usize,
}

impl Counter {
    fn finish_one(&self) {
        let mut st = self.state.lock().unwrap();
        st.outstanding -= 1;
        if st.outstanding == 0 {
            self.cv.notify_all();
        }
    }
}

struct Inner {
    executors: Vec<Arc<dyn Executor>>,
    default_label: String,
    events: Sender<Event>,
    counter: Arc<Counter>,
    next_id: AtomicU64,
    retries: u32,
    run_dir: PathBuf,
    stager: Arc<Stager>,
    event_thread: Mutex<Option<JoinHandle<()>>>,
    staging_threads: Mutex<Vec<JoinHandle<()>>>,
    shut_down: Mutex<bool>,
}

/// Handle to a running kernel. Clones share the same kernel; dropping the
/// last one cancels unfinished work.
#[derive(Clone)]
pub struct DataFlowKernel {
    inner: Arc<Inner>,
}

impl DataFlowKernel {
    pub fn builder() -> KernelBuilder {
        KernelBuilder::new()
    }

    pub fn run_dir(&self) -> &Path {
        &self.inner.run_dir
    }

    pub fn stager(&self) -> &Stager {
        &self.inner.stager
    }

    pub fn executor_labels(&self) -> Vec<String> {
        self.inner.executors.iter().map(|e| e.label().to_string()).collect()
    }

    pub fn executor(&self, label: &str) -> Option<&Arc<dyn Executor>> {
        self.inner.executors.iter().find(|e| e.label() == label)
    }

    /// Invokes `app` with positional arguments only.
    pub fn call(&self, app: &AppSpec, args: Vec<ArgValue>) -> Result<AppFuture, KernelError> {
        self.invoke(app, Invocation::with_args(args))
    }

    /// Registers a task and returns its future without waiting for it.
    ///
    /// A list of files under the `outputs` keyword is taken as the declared
    /// outputs, in addition to `inv.outputs`.
    pub fn invoke(&self, app: &AppSpec, inv: Invocation) -> Result<AppFuture, KernelError> {
        let Invocation {
            args,
            mut kwargs,
            mut outputs,
        } = inv;
        if let Some(v) = kwargs.remove("outputs") {
            match v {
                ArgValue::List(items) => {
                    for item in items {
                        match item {
                            ArgValue::File(f) => outputs.push(f),
                            other => {
                                return Err(KernelError::Invocation(format!(
                                    "outputs must be files, got {}",
                                    other.type_name()
                                )))
                            }
                        }
                    }
                }
                ArgValue::File(f) => outputs.push(f),
                other => {
                    return Err(KernelError::Invocation(format!(
                        "outputs must be a list of files, got {}",
                        other.type_name()
                    )))
                }
            }
        }
        let label = app
            .options()
            .executor_label
            .clone()
            .unwrap_or_else(|| self.inner.default_label.clone());
        if self.executor(&label).is_none() {
            return Err(KernelError::UnknownExecutor(label));
        }
        let retries = app.options().retries.unwrap_or(self.inner.retries);
        let outputs: Vec<FileRef> = outputs
            .into_iter()
            .map(|f| f.resolved_against(&self.inner.run_dir))
            .collect();

        let cell = Arc::new(FutureCell::new());
        // Ids are handed out under the counter lock so they follow the
        // order in which registrations reach the event thread.
        let mut st = self.inner.counter.state.lock().unwrap();
        if st.closed {
            return Err(KernelError::ShutDown);
        }
        let id = TaskId(self.inner.next_id.fetch_add(1, Ordering::SeqCst));
        let data: Vec<DataFuture> = outputs
            .iter()
            .enumerate()
            .map(|(i, f)| DataFuture::new(id, i, f.clone()))
            .collect();
        let record = TaskRecord::new(id, app.clone(), args, kwargs, outputs, retries, label);
        if let Some(dep) = record.depends_on.iter().find(|d| **d >= id) {
            return Err(KernelError::Invocation(format!(
                "task {id} cannot depend on task {dep}"
            )));
        }
        st.outstanding += 1;
        let reg = Registration {
            record,
            cell: cell.clone(),
            data: data.clone(),
        };
        if self.inner.events.send(Event::Register(Box::new(reg))).is_err() {
            st.outstanding -= 1;
            return Err(KernelError::ShutDown);
        }
        drop(st);
        Ok(AppFuture::new(id, cell, data))
    }

    /// Number of registered tasks not yet terminal.
    pub fn outstanding(&self) -> usize {
        self.inner.counter.state.lock().unwrap().outstanding
    }

    pub fn pool_state(&self, label: &str) -> Option<WorkerPoolState> {
        self.executor(label).and_then(|e| e.pool_state())
    }

    /// Adjusts scaling parameters of every worker pool; takes effect at the
    /// next poll tick.
    pub fn update_strategy(&self, update: &StrategyUpdate) {
        for e in &self.inner.executors {
            e.update_strategy(update);
        }
    }

    /// Stops the kernel. Safe to call more than once.
    pub fn shutdown(&self, mode: ShutdownMode) {
        self.inner.shutdown(mode);
    }
}

impl Inner {
    fn shutdown(&self, mode: ShutdownMode) {
        let mut done = self.shut_down.lock().unwrap();
        if *done {
            return;
        }
        {
            let mut st = self.counter.state.lock().unwrap();
            st.closed = true;
            if mode == ShutdownMode::Drain {
                while st.outstanding > 0 {
                    st = self.counter.cv.wait(st).unwrap();
                }
            }
        }
        if mode == ShutdownMode::Cancel {
            let (ack_tx, ack_rx) = unbounded();
            if self.events.send(Event::Cancel(ack_tx)).is_ok() {
                let _ = ack_rx.recv();
            }
        }
        for e in &self.executors {
            e.shutdown();
        }
        let _ = self.events.send(Event::Stop);
        if let Some(h) = self.event_thread.lock().unwrap().take() {
            let _ = h.join();
        }
        for h in self.staging_threads.lock().unwrap().drain(..) {
            let _ = h.join();
        }
        *done = true;
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.shutdown(ShutdownMode::Cancel);
    }
}

/// Waits for every future, returning outcomes in input order. With a
/// timeout, fails listing the tasks still unfinished at the deadline.
pub fn wait_all(futures: &[AppFuture], timeout: Option<Duration>) -> Result<Vec<Outcome>, KernelError> {
    let deadline = timeout.map(|t| Instant::now() + t);
    let mut out = Vec::with_capacity(futures.len());
    for f in futures {
        match f.wait_deadline(deadline) {
            Some(o) => out.push(o),
            None => {
                let unfinished = futures.iter().filter(|f| !f.done()).map(|f| f.task_id()).collect();
                return Err(KernelError::Timeout { unfinished });
            }
        }
    }
    Ok(out)
}

struct Registration {
    record: TaskRecord,
    cell: Arc<FutureCell>,
    data: Vec<DataFuture>,
}

type StageJob = Box<dyn FnOnce() + Send>;

enum Event {
    Register(Box<Registration>),
    Staged(TaskId, Result<ExecTask, TaskError>),
    RetryDue(TaskId),
    Cancel(Sender<()>),
    Stop,
}

struct Node {
    record: TaskRecord,
    cell: Arc<FutureCell>,
    data: Vec<DataFuture>,
    unresolved: BTreeSet<TaskId>,
    dependents: Vec<TaskId>,
}

/// State owned by the event thread.
struct Engine {
    nodes: HashMap<TaskId, Node>,
    resolved: HashMap<TaskId, Resolution>,
    executors: HashMap<String, Arc<dyn Executor>>,
    stager: Arc<Stager>,
    run_dir: PathBuf,
    retry_delay: Duration,
    events: Sender<Event>,
    stage_tx: Sender<StageJob>,
    counter: Arc<Counter>,
    log: BufWriter<File>,
    observer: Option<Observer>,
}

impl Engine {
    fn run(mut self, events: Receiver<Event>, completions: Receiver<Completion>) {
        loop {
            select! {
                recv(events) -> ev => match ev {
                    Ok(Event::Stop) | Err(_) => break,
                    Ok(ev) => self.handle(ev),
                },
                recv(completions) -> c => match c {
                    Ok(c) => self.complete(c.task, c.outcome),
                    Err(_) => break,
                },
            }
            if events.is_empty() && completions.is_empty() {
                let _ = self.log.flush();
            }
        }
        let _ = self.log.flush();
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Register(reg) => self.register(*reg),
            Event::Staged(id, result) => self.staged(id, result),
            Event::RetryDue(id) => {
                if self.state(id) == Some(TaskState::RetryWait) {
                    self.launch(id);
                }
            }
            Event::Cancel(ack) => {
                self.cancel_all();
                let _ = ack.send(());
            }
            Event::Stop => {}
        }
    }

    fn state(&self, id: TaskId) -> Option<TaskState> {
        self.nodes.get(&id).map(|n| n.record.state)
    }

    fn record_transition(&mut self, id: TaskId, from: Option<TaskState>, to: TaskState) {
        let node = &self.nodes[&id];
        node.cell.set_state(to);
        let t = Transition {
            task: id,
            from,
            to,
            executor: node.record.executor_label.clone(),
            at: SystemTime::now(),
        };
        let secs = t.at.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let _ = writeln!(
            self.log,
            "{secs:.6}\t{}\t{}\t{}\t{}",
            id,
            from.map_or("-", |s| s.as_str()),
            to.as_str(),
            t.executor
        );
        if let Some(obs) = &self.observer {
            obs(&t);
        }
    }

    fn transition(&mut self, id: TaskId, to: TaskState) {
        let node = self.nodes.get_mut(&id).expect("known task");
        match node.record.transition(to) {
            Ok(from) => self.record_transition(id, Some(from), to),
            Err(e) => panic!("{e}"),
        }
    }

    fn register(&mut self, reg: Registration) {
        let id = reg.record.id;
        let mut unresolved = BTreeSet::new();
        for dep in &reg.record.depends_on {
            if self.resolved.contains_key(dep) {
                continue;
            }
            match self.nodes.get_mut(dep) {
                Some(n) => {
                    n.dependents.push(id);
                    unresolved.insert(*dep);
                }
                None => {
                    // Ids below ours that were never registered here belong
                    // to another kernel; treat them as failed upstream.
                    self.resolved.entry(*dep).or_insert_with(|| {
                        Resolution::from(Err(TaskError::app(format!("task {dep} is unknown to this kernel"))))
                    });
                }
            }
        }
        self.nodes.insert(
            id,
            Node {
                record: reg.record,
                cell: reg.cell,
                data: reg.data,
                unresolved,
                dependents: Vec::new(),
            },
        );
        self.record_transition(id, None, TaskState::Pending);
        if self.nodes[&id].unresolved.is_empty() {
            self.promote(id);
        }
    }

    /// Called once every dependency is terminal: fails the task if any of
    /// them failed, else launches it.
    fn promote(&mut self, id: TaskId) {
        if let Some(err) = self.upstream_failure(id) {
            self.finish_failed(id, TaskState::DepFailed, err);
            return;
        }
        self.launch(id);
    }

    /// The error a task inherits from its dependencies, if any.
    fn upstream_failure(&self, id: TaskId) -> Option<TaskError> {
        let rec = &self.nodes[&id].record;
        let mut failed = BTreeSet::new();
        let mut first_message = None;
        for dep in &rec.depends_on {
            if let Some(Resolution { outcome: Err(e), .. }) = self.resolved.get(dep) {
                failed.insert(*dep);
                if let ErrorKind::DepFailure(up) = &e.kind {
                    failed.extend(up.iter().copied());
                }
                first_message.get_or_insert_with(|| format!("dependency {dep} failed: {}", e.message));
            }
        }
        if !failed.is_empty() {
            return Some(TaskError::new(
                ErrorKind::DepFailure(failed.into_iter().collect()),
                first_message.unwrap_or_default(),
            ));
        }
        // A successful producer whose declared output never appeared.
        let mut refs = Vec::new();
        for v in rec.args.iter().chain(rec.kwargs.values()) {
            v.collect_data_futures(&mut refs);
        }
        for (dep, index) in refs {
            if let Some(res) = self.resolved.get(&dep) {
                match res.outputs.get(index) {
                    Some(Ok(_)) => {}
                    Some(Err(e)) => return Some(e.clone()),
                    None => {
                        return Some(TaskError::app(format!("task {dep} has no output {index}")));
                    }
                }
            }
        }
        None
    }

    fn launch(&mut self, id: TaskId) {
        self.transition(id, TaskState::Launchable);
        self.transition(id, TaskState::Running);
        let node = &self.nodes[&id];
        let rec = &node.record;
        let args = match substitute_futures(&rec.args, &self.resolved) {
            Ok(a) => a,
            Err(e) => return self.attempt_failed(id, substitution_error(e)),
        };
        let kwargs: Result<BTreeMap<String, ArgValue>, SubstituteError> = rec
            .kwargs
            .iter()
            .map(|(k, v)| Ok((k.clone(), substitute_value(v, &self.resolved)?)))
            .collect();
        let kwargs = match kwargs {
            Ok(k) => k,
            Err(e) => return self.attempt_failed(id, substitution_error(e)),
        };
        let job = Prepared {
            id,
            app: rec.app.clone(),
            args,
            kwargs,
            outputs: rec.outputs.clone(),
            run_dir: self.run_dir.clone(),
        };
        let remote = job
            .args
            .iter()
            .chain(job.kwargs.values())
            .any(|v| v.any_file(&|f| f.scheme().is_remote()));
        if remote {
            let stager = self.stager.clone();
            let events = self.events.clone();
            let sent = self.stage_tx.send(Box::new(move || {
                let result = job.stage(&stager);
                let _ = events.send(Event::Staged(id, result));
            }));
            if sent.is_err() {
                self.attempt_failed(id, TaskError::staging("staging threads are gone"));
            }
        } else {
            let result = job.stage(&self.stager);
            self.staged(id, result);
        }
    }

    fn staged(&mut self, id: TaskId, result: Result<ExecTask, TaskError>) {
        if self.state(id) != Some(TaskState::Running) {
            return;
        }
        let task = match result {
            Ok(t) => t,
            Err(e) => return self.attempt_failed(id, e),
        };
        let label = self.nodes[&id].record.executor_label.clone();
        let executor = self.executors[&label].clone();
        if let Err(e) = executor.execute(task) {
            self.attempt_failed(id, TaskError::executor_down(e.to_string()));
        }
    }

    fn complete(&mut self, id: TaskId, outcome: Outcome) {
        if self.state(id) != Some(TaskState::Running) {
            log::debug!("ignoring completion of task {id} in state {:?}", self.state(id));
            return;
        }
        match outcome {
            Ok(value) => self.succeed(id, value),
            Err(e) => self.attempt_failed(id, e),
        }
    }

    fn succeed(&mut self, id: TaskId, value: ArgValue) {
        let outputs: Vec<Result<FileRef, TaskError>> = self.nodes[&id]
            .record
            .outputs
            .iter()
            .map(|f| self.stager.stage_out(f))
            .collect();
        self.transition(id, TaskState::Done);
        let node = self.nodes.get_mut(&id).unwrap();
        let outcome: Outcome = Ok(value);
        let _ = node.record.set_result(outcome.clone());
        for (df, out) in node.data.iter().zip(&outputs) {
            df.resolve(out.clone());
        }
        node.cell.resolve(outcome.clone());
        self.resolved.insert(id, Resolution { outcome, outputs });
        self.counter.finish_one();
        self.release_dependents(id);
    }

    fn release_dependents(&mut self, id: TaskId) {
        let dependents = std::mem::take(&mut self.nodes.get_mut(&id).unwrap().dependents);
        for d in dependents {
            let Some(n) = self.nodes.get_mut(&d) else { continue };
            if n.record.state != TaskState::Pending {
                continue;
            }
            n.unresolved.remove(&id);
            if n.unresolved.is_empty() {
                self.promote(d);
            }
        }
    }

    fn attempt_failed(&mut self, id: TaskId, err: TaskError) {
        let node = self.nodes.get_mut(&id).unwrap();
        if node.record.retries_left > 0 && err.is_retryable() {
            node.record.retries_left -= 1;
            log::info!("task {id} failed ({err}); {} retries left", node.record.retries_left);
            self.transition(id, TaskState::RetryWait);
            if self.retry_delay.is_zero() {
                self.launch(id);
            } else {
                let events = self.events.clone();
                let delay = self.retry_delay;
                let _ = thread::Builder::new().name(format!("retry-{id}")).spawn(move || {
                    thread::sleep(delay);
                    let _ = events.send(Event::RetryDue(id));
                });
            }
            return;
        }
        self.finish_failed(id, TaskState::Failed, err);
    }

    /// Terminal failure of `id` followed by every transitive dependent.
    fn finish_failed(&mut self, id: TaskId, state: TaskState, err: TaskError) {
        self.transition(id, state);
        let node = self.nodes.get_mut(&id).unwrap();
        let outcome: Outcome = Err(err.clone());
        let _ = node.record.set_result(outcome.clone());
        let out_err = TaskError::new(err.kind.clone(), format!("producer task {id} failed: {}", err.message));
        for df in &node.data {
            df.resolve(Err(out_err.clone()));
        }
        node.cell.resolve(outcome.clone());
        self.resolved.insert(id, Resolution::from(outcome));
        self.counter.finish_one();

        let dependents = std::mem::take(&mut self.nodes.get_mut(&id).unwrap().dependents);
        for d in dependents {
            if self.state(d) == Some(TaskState::Pending) {
                if let Some(e) = self.upstream_failure(d) {
                    self.finish_failed(d, TaskState::DepFailed, e);
                }
            }
        }
    }

    fn cancel_all(&mut self) {
        let mut live: Vec<TaskId> = self
            .nodes
            .iter()
            .filter(|(_, n)| !n.record.state.is_terminal())
            .map(|(id, _)| *id)
            .collect();
        // Dependents first, so each is reported as cancelled rather than dep_failed.
        live.sort_unstable_by(|a, b| b.cmp(a));
        for id in live {
            if self.state(id).is_some_and(|s| !s.is_terminal()) {
                let err = TaskError::new(ErrorKind::Cancelled, "kernel shut down before the task finished");
                self.finish_failed(id, TaskState::Failed, err);
            }
        }
    }
}

fn substitution_error(e: SubstituteError) -> TaskError {
    match e {
        SubstituteError::OutputUnavailable { error, .. } => error,
        other => TaskError::app(other.to_string()),
    }
}

/// A task with its arguments substituted, ready to be staged.
struct Prepared {
    id: TaskId,
    app: AppSpec,
    args: Vec<ArgValue>,
    kwargs: BTreeMap<String, ArgValue>,
    outputs: Vec<FileRef>,
    run_dir: PathBuf,
}

impl Prepared {
    fn stage(mut self, stager: &Stager) -> Result<ExecTask, TaskError> {
        let id = self.id;
        let mut stage = |f: &mut FileRef| -> Result<(), TaskError> {
            *f = stager.stage_in(f, id)?;
            Ok(())
        };
        for v in self.args.iter_mut().chain(self.kwargs.values_mut()) {
            v.visit_files_mut(&mut stage)?;
        }
        let outputs = self
            .outputs
            .iter()
            .map(|f| stager.prepare_output(f).map_err(TaskError::from))
            .collect::<Result<Vec<_>, _>>()?;
        let payload = match self.app.kind() {
            AppKind::Native { name, callable } => Payload::Native {
                name: name.clone(),
                callable: Some(callable.clone()),
                args: self.args,
                kwargs: self.kwargs,
                outputs,
            },
            AppKind::Shell { template, .. } => {
                let command = template
                    .render(&self.args, &self.kwargs, &[], &outputs)
                    .map_err(|e| TaskError::app(format!("cannot render command: {e}")))?;
                let tasks = self.run_dir.join("tasks");
                Payload::Shell {
                    command,
                    cwd: self.run_dir.clone(),
                    stdout: tasks.join(format!("task_{id}.stdout")),
                    stderr: tasks.join(format!("task_{id}.stderr")),
                }
            }
        };
        Ok(ExecTask { id, payload })
    }
}
