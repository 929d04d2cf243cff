//! Task graph data model: identities, argument trees, and the dependency
//! scanner that turns futures found in arguments into graph edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::app::AppSpec;
use crate::error::{Outcome, TaskError};
use crate::future::{AppFuture, DataFuture};
use crate::staging::FileRef;

/// Kernel-local task identity, assigned in submission order starting at 0.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TaskState {
    Pending = 0,
    Launchable = 1,
    Running = 2,
    RetryWait = 3,
    Done = 4,
    Failed = 5,
    DepFailed = 6,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed | TaskState::DepFailed)
    }

    /// Legal edges of the task lifecycle. The `* -> failed` edges from
    /// non-running states are only taken by a cancelling shutdown.
    pub fn can_transition_to(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Pending, Launchable)
                | (Pending, DepFailed)
                | (Launchable, Running)
                | (Running, Done)
                | (Running, RetryWait)
                | (Running, Failed)
                | (RetryWait, Launchable)
                | (Pending, Failed)
                | (Launchable, Failed)
                | (RetryWait, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "pending",
            TaskState::Launchable => "launchable",
            TaskState::Running => "running",
            TaskState::RetryWait => "retry_wait",
            TaskState::Done => "done",
            TaskState::Failed => "failed",
            TaskState::DepFailed => "dep_failed",
        }
    }

    pub(crate) fn from_u8(v: u8) -> TaskState {
        match v {
            0 => TaskState::Pending,
            1 => TaskState::Launchable,
            2 => TaskState::Running,
            3 => TaskState::RetryWait,
            4 => TaskState::Done,
            5 => TaskState::Failed,
            _ => TaskState::DepFailed,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Argument and result values exchanged between apps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ArgValue {
    Null,
    Int(i64),
    Real(f64),
    Bool(bool),
    Text(String),
    Bytes(#[serde(with = "serde_bytes")] Vec<u8>),
    /// Opaque serialized value. Never scanned for futures.
    Blob(#[serde(with = "serde_bytes")] Vec<u8>),
    File(FileRef),
    Future(TaskId),
    DataFuture(TaskId, usize),
    List(Vec<ArgValue>),
    Map(BTreeMap<String, ArgValue>),
}

impl ArgValue {
    /// Encodes any serde value into an opaque blob.
    pub fn blob_of<T: Serialize>(value: &T) -> Result<ArgValue, TaskError> {
        let mut buf = Vec::new();
        ciborium::into_writer(value, &mut buf).map_err(|e| TaskError::app(format!("blob encoding failed: {e}")))?;
        Ok(ArgValue::Blob(buf))
    }

    pub fn decode_blob<T: serde::de::DeserializeOwned>(&self) -> Result<T, TaskError> {
        match self {
            ArgValue::Blob(bytes) => ciborium::from_reader(bytes.as_slice())
                .map_err(|e| TaskError::app(format!("blob decoding failed: {e}"))),
            other => Err(TaskError::app(format!("expected blob, found {}", other.type_name()))),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ArgValue::Null => "null",
            ArgValue::Int(_) => "int",
            ArgValue::Real(_) => "real",
            ArgValue::Bool(_) => "bool",
            ArgValue::Text(_) => "text",
            ArgValue::Bytes(_) => "bytes",
            ArgValue::Blob(_) => "blob",
            ArgValue::File(_) => "file",
            ArgValue::Future(_) => "future",
            ArgValue::DataFuture(..) => "data_future",
            ArgValue::List(_) => "list",
            ArgValue::Map(_) => "map",
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ArgValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            ArgValue::Real(v) => Some(*v),
            ArgValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ArgValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_file(&self) -> Option<&FileRef> {
        match self {
            ArgValue::File(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[ArgValue]> {
        match self {
            ArgValue::List(items) => Some(items),
            _ => None,
        }
    }

    /// Visits every file reference in the tree, mutably.
    pub(crate) fn visit_files_mut<E>(&mut self, f: &mut impl FnMut(&mut FileRef) -> Result<(), E>) -> Result<(), E> {
        match self {
            ArgValue::File(file) => f(file),
            ArgValue::List(items) => items.iter_mut().try_for_each(|v| v.visit_files_mut(f)),
            ArgValue::Map(map) => map.values_mut().try_for_each(|v| v.visit_files_mut(f)),
            _ => Ok(()),
        }
    }

    pub(crate) fn any_file(&self, pred: &impl Fn(&FileRef) -> bool) -> bool {
        match self {
            ArgValue::File(file) => pred(file),
            ArgValue::List(items) => items.iter().any(|v| v.any_file(pred)),
            ArgValue::Map(map) => map.values().any(|v| v.any_file(pred)),
            _ => false,
        }
    }

    fn collect_futures(&self, out: &mut BTreeSet<TaskId>) {
        match self {
            ArgValue::Future(id) | ArgValue::DataFuture(id, _) => {
                out.insert(*id);
            }
            ArgValue::List(items) => items.iter().for_each(|v| v.collect_futures(out)),
            ArgValue::Map(map) => map.values().for_each(|v| v.collect_futures(out)),
            _ => {}
        }
    }

    pub(crate) fn collect_data_futures(&self, out: &mut Vec<(TaskId, usize)>) {
        match self {
            ArgValue::DataFuture(id, idx) => out.push((*id, *idx)),
            ArgValue::List(items) => items.iter().for_each(|v| v.collect_data_futures(out)),
            ArgValue::Map(map) => map.values().for_each(|v| v.collect_data_futures(out)),
            _ => {}
        }
    }
}

impl From<i64> for ArgValue {
    fn from(v: i64) -> Self {
        ArgValue::Int(v)
    }
}

impl From<i32> for ArgValue {
    fn from(v: i32) -> Self {
        ArgValue::Int(v.into())
    }
}

impl From<f64> for ArgValue {
    fn from(v: f64) -> Self {
        ArgValue::Real(v)
    }
}

impl From<bool> for ArgValue {
    fn from(v: bool) -> Self {
        ArgValue::Bool(v)
    }
}

impl From<&str> for ArgValue {
    fn from(v: &str) -> Self {
        ArgValue::Text(v.to_owned())
    }
}

impl From<String> for ArgValue {
    fn from(v: String) -> Self {
        ArgValue::Text(v)
    }
}

impl From<FileRef> for ArgValue {
    fn from(v: FileRef) -> Self {
        ArgValue::File(v)
    }
}

impl From<&AppFuture> for ArgValue {
    fn from(f: &AppFuture) -> Self {
        ArgValue::Future(f.task_id())
    }
}

impl From<&DataFuture> for ArgValue {
    fn from(f: &DataFuture) -> Self {
        ArgValue::DataFuture(f.producer(), f.index())
    }
}

impl<T: Into<ArgValue>> From<Vec<T>> for ArgValue {
    fn from(v: Vec<T>) -> Self {
        ArgValue::List(v.into_iter().map(Into::into).collect())
    }
}

/// One node of the dependency graph.
#[derive(Clone)]
pub struct TaskRecord {
    pub id: TaskId,
    pub app: AppSpec,
    pub args: Vec<ArgValue>,
    pub kwargs: BTreeMap<String, ArgValue>,
    pub outputs: Vec<FileRef>,
    pub depends_on: BTreeSet<TaskId>,
    pub state: TaskState,
    pub retries_left: u32,
    pub executor_label: String,
    pub result_slot: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecordError {
    #[error("illegal transition for task {id}: {from} -> {to}")]
    IllegalTransition { id: TaskId, from: TaskState, to: TaskState },
    #[error("result of task {0} already written")]
    ResultAlreadySet(TaskId),
}

impl TaskRecord {
    pub fn new(
        id: TaskId,
        app: AppSpec,
        args: Vec<ArgValue>,
        kwargs: BTreeMap<String, ArgValue>,
        outputs: Vec<FileRef>,
        retries: u32,
        executor_label: String,
    ) -> Self {
        let depends_on = scan_dependencies(&args, &kwargs);
        Self {
            id,
            app,
            args,
            kwargs,
            outputs,
            depends_on,
            state: TaskState::Pending,
            retries_left: retries,
            executor_label,
            result_slot: None,
        }
    }

    /// Moves to `next`, returning the previous state.
    pub fn transition(&mut self, next: TaskState) -> Result<TaskState, RecordError> {
        let from = self.state;
        if !from.can_transition_to(next) {
            return Err(RecordError::IllegalTransition {
                id: self.id,
                from,
                to: next,
            });
        }
        self.state = next;
        Ok(from)
    }

    pub fn set_result(&mut self, outcome: Outcome) -> Result<(), RecordError> {
        if self.result_slot.is_some() {
            return Err(RecordError::ResultAlreadySet(self.id));
        }
        self.result_slot = Some(outcome);
        Ok(())
    }
}

impl fmt::Debug for TaskRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskRecord")
            .field("id", &self.id)
            .field("app", &self.app.name())
            .field("depends_on", &self.depends_on)
            .field("state", &self.state)
            .field("retries_left", &self.retries_left)
            .field("executor_label", &self.executor_label)
            .finish_non_exhaustive()
    }
}

/// Returns every task referenced by a future anywhere in the arguments.
///
/// Lists and maps are walked recursively; blobs are opaque and never scanned.
pub fn scan_dependencies(args: &[ArgValue], kwargs: &BTreeMap<String, ArgValue>) -> BTreeSet<TaskId> {
    let mut deps = BTreeSet::new();
    for value in args.iter().chain(kwargs.values()) {
        value.collect_futures(&mut deps);
    }
    deps
}

/// What a finished upstream task contributes to substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolution {
    pub outcome: Outcome,
    /// Produced output files, one per declared output.
    pub outputs: Vec<Result<FileRef, TaskError>>,
}

impl From<Outcome> for Resolution {
    fn from(outcome: Outcome) -> Self {
        Self {
            outcome,
            outputs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SubstituteError {
    #[error("dependency {0} is not resolved")]
    Unresolved(TaskId),
    #[error("dependency {0} failed: {1}")]
    DependencyFailed(TaskId, TaskError),
    #[error("task {task} has no output {index}")]
    NoSuchOutput { task: TaskId, index: usize },
    #[error("output {index} of task {task} is unavailable: {error}")]
    OutputUnavailable {
        task: TaskId,
        index: usize,
        error: TaskError,
    },
}

/// Replaces futures by the values they resolved to.
pub fn substitute_futures(
    args: &[ArgValue],
    resolved: &HashMap<TaskId, Resolution>,
) -> Result<Vec<ArgValue>, SubstituteError> {
    args.iter().map(|v| substitute_value(v, resolved)).collect()
}

pub fn substitute_value(value: &ArgValue, resolved: &HashMap<TaskId, Resolution>) -> Result<ArgValue, SubstituteError> {
    Ok(match value {
        ArgValue::Future(id) => {
            let res = resolved.get(id).ok_or(SubstituteError::Unresolved(*id))?;
            match &res.outcome {
                Ok(v) => v.clone(),
                Err(e) => return Err(SubstituteError::DependencyFailed(*id, e.clone())),
            }
        }
        ArgValue::DataFuture(id, index) => {
            let res = resolved.get(id).ok_or(SubstituteError::Unresolved(*id))?;
            if let Err(e) = &res.outcome {
                return Err(SubstituteError::DependencyFailed(*id, e.clone()));
            }
            match res.outputs.get(*index) {
                Some(Ok(file)) => ArgValue::File(file.clone()),
                Some(Err(error)) => {
                    return Err(SubstituteError::OutputUnavailable {
                        task: *id,
                        index: *index,
                        error: error.clone(),
                    })
                }
                None => {
                    return Err(SubstituteError::NoSuchOutput {
                        task: *id,
                        index: *index,
                    })
                }
            }
        }
        ArgValue::List(items) => ArgValue::List(
            items
                .iter()
                .map(|v| substitute_value(v, resolved))
                .collect::<Result<_, _>>()?,
        ),
        ArgValue::Map(map) => ArgValue::Map(
            map.iter()
                .map(|(k, v)| Ok((k.clone(), substitute_value(v, resolved)?)))
                .collect::<Result<_, _>>()?,
        ),
        other => other.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;
    use proptest::prelude::*;

    // Independent recursive walk used as the oracle for the scanner and the
    // substitution checks below.
    fn oracle_walk(v: &ArgValue, out: &mut Vec<u64>) {
        match v {
            ArgValue::Future(t) => out.push(t.0),
            ArgValue::DataFuture(t, _) => out.push(t.0),
            ArgValue::List(xs) => xs.iter().for_each(|x| oracle_walk(x, out)),
            ArgValue::Map(m) => m.values().for_each(|x| oracle_walk(x, out)),
            _ => {}
        }
    }

    fn oracle_scan(args: &[ArgValue], kwargs: &BTreeMap<String, ArgValue>) -> BTreeSet<TaskId> {
        let mut ids = Vec::new();
        args.iter()
            .chain(kwargs.values())
            .for_each(|v| oracle_walk(v, &mut ids));
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().map(TaskId).collect()
    }

    fn set(ids: &[u64]) -> BTreeSet<TaskId> {
        ids.iter().copied().map(TaskId).collect()
    }

    #[test]
    fn scan_scalars_only() {
        let args = vec![ArgValue::Int(5), ArgValue::from("x")];
        assert_eq!(scan_dependencies(&args, &BTreeMap::new()), set(&[]));
    }

    #[test]
    fn scan_positional_and_keyword() {
        let args = vec![ArgValue::Future(TaskId(3))];
        let kwargs = BTreeMap::from([("f".to_string(), ArgValue::DataFuture(TaskId(7), 0))]);
        let expected = oracle_scan(&args, &kwargs);
        assert_eq!(expected, set(&[3, 7]));
        assert_eq!(scan_dependencies(&args, &kwargs), expected);
    }

    #[test]
    fn scan_collapses_duplicates() {
        let args = vec![ArgValue::List(vec![
            ArgValue::Future(TaskId(2)),
            ArgValue::List(vec![ArgValue::Future(TaskId(2))]),
        ])];
        let expected = oracle_scan(&args, &BTreeMap::new());
        assert_eq!(expected, set(&[2]));
        assert_eq!(scan_dependencies(&args, &BTreeMap::new()), expected);
    }

    #[test]
    fn scan_ignores_blob_contents() {
        // A blob carrying the serialized form of a future is still opaque.
        let blob = ArgValue::blob_of(&ArgValue::Future(TaskId(9))).unwrap();
        assert!(scan_dependencies(&[blob], &BTreeMap::new()).is_empty());
    }

    #[test]
    fn substitute_communicate_result() {
        let resolved = HashMap::from([(TaskId(1), Resolution::from(Ok(ArgValue::from("hello bob"))))]);
        let out = substitute_futures(&[ArgValue::Future(TaskId(1))], &resolved).unwrap();
        assert_eq!(out, vec![ArgValue::from("hello bob")]);
    }

    #[test]
    fn substitute_empty() {
        assert_eq!(substitute_futures(&[], &HashMap::new()).unwrap(), vec![]);
    }

    #[test]
    fn substitute_nested_list() {
        let args = vec![ArgValue::List(vec![ArgValue::Future(TaskId(1)), ArgValue::Int(2)])];
        let resolved = HashMap::from([(TaskId(1), Resolution::from(Ok(ArgValue::Int(7))))]);
        let out = substitute_futures(&args, &resolved).unwrap();
        assert_eq!(out, vec![ArgValue::List(vec![ArgValue::Int(7), ArgValue::Int(2)])]);
        let mut leftover = Vec::new();
        out.iter().for_each(|v| oracle_walk(v, &mut leftover));
        assert!(leftover.is_empty());
    }

    #[test]
    fn substitute_missing_entry() {
        let err = substitute_futures(&[ArgValue::Future(TaskId(4))], &HashMap::new()).unwrap_err();
        assert_eq!(err, SubstituteError::Unresolved(TaskId(4)));
    }

    #[test]
    fn substitute_failed_dependency() {
        let failure = TaskError::app("boom");
        let resolved = HashMap::from([(TaskId(1), Resolution::from(Err(failure.clone())))]);
        let err = substitute_futures(&[ArgValue::Future(TaskId(1))], &resolved).unwrap_err();
        assert_eq!(err, SubstituteError::DependencyFailed(TaskId(1), failure));
    }

    #[test]
    fn substitute_data_future_with_file() {
        let file = FileRef::local("/tmp/out.txt");
        let resolved = HashMap::from([(
            TaskId(0),
            Resolution {
                outcome: Ok(ArgValue::Null),
                outputs: vec![Ok(file.clone())],
            },
        )]);
        let out = substitute_futures(&[ArgValue::DataFuture(TaskId(0), 0)], &resolved).unwrap();
        assert_eq!(out, vec![ArgValue::File(file.clone())]);

        let missing = TaskError::new(ErrorKind::MissingOutput(file.clone()), "absent");
        let resolved = HashMap::from([(
            TaskId(0),
            Resolution {
                outcome: Ok(ArgValue::Null),
                outputs: vec![Err(missing)],
            },
        )]);
        assert!(matches!(
            substitute_futures(&[ArgValue::DataFuture(TaskId(0), 0)], &resolved),
            Err(SubstituteError::OutputUnavailable { .. })
        ));
        assert!(matches!(
            substitute_futures(&[ArgValue::DataFuture(TaskId(0), 3)], &resolved),
            Err(SubstituteError::NoSuchOutput { index: 3, .. })
        ));
    }

    #[test]
    fn state_machine_edges() {
        use TaskState::*;
        assert!(Pending.can_transition_to(Launchable));
        assert!(RetryWait.can_transition_to(Launchable));
        assert!(!Pending.can_transition_to(Running));
        assert!(!Done.can_transition_to(Launchable));
        assert!(!DepFailed.can_transition_to(Launchable));
        assert!(!Running.can_transition_to(DepFailed));
        for s in [Done, Failed, DepFailed] {
            assert!(s.is_terminal());
        }
    }

    #[test]
    fn record_result_written_once() {
        let app = crate::app::builtins::noop();
        let mut rec = TaskRecord::new(TaskId(0), app, vec![], BTreeMap::new(), vec![], 0, "x".into());
        rec.set_result(Ok(ArgValue::Null)).unwrap();
        assert_eq!(
            rec.set_result(Ok(ArgValue::Null)),
            Err(RecordError::ResultAlreadySet(TaskId(0)))
        );
        assert!(rec.transition(TaskState::Running).is_err());
        assert_eq!(rec.transition(TaskState::Launchable), Ok(TaskState::Pending));
    }

    fn arb_value() -> impl Strategy<Value = ArgValue> {
        let leaf = prop_oneof![
            any::<i64>().prop_map(ArgValue::Int),
            any::<bool>().prop_map(ArgValue::Bool),
            "[a-z]{0,6}".prop_map(ArgValue::Text),
            proptest::collection::vec(any::<u8>(), 0..8).prop_map(ArgValue::Bytes),
            (0u64..20).prop_map(|t| ArgValue::Future(TaskId(t))),
            (0u64..20, 0usize..2).prop_map(|(t, i)| ArgValue::DataFuture(TaskId(t), i)),
        ];
        leaf.prop_recursive(4, 48, 5, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..5).prop_map(ArgValue::List),
                proptest::collection::btree_map("[a-c]", inner, 0..4).prop_map(ArgValue::Map),
            ]
        })
    }

    proptest! {
        #[test]
        fn scan_matches_oracle(args in proptest::collection::vec(arb_value(), 0..5)) {
            prop_assert_eq!(scan_dependencies(&args, &BTreeMap::new()), oracle_scan(&args, &BTreeMap::new()));
        }

        #[test]
        fn substitution_leaves_no_futures(args in proptest::collection::vec(arb_value(), 0..5)) {
            let deps = scan_dependencies(&args, &BTreeMap::new());
            let resolved: HashMap<TaskId, Resolution> = deps
                .iter()
                .map(|id| {
                    (*id, Resolution {
                        outcome: Ok(ArgValue::Int(id.0 as i64)),
                        outputs: vec![Ok(FileRef::local("/a")), Ok(FileRef::local("/b"))],
                    })
                })
                .collect();
            let out = substitute_futures(&args, &resolved).unwrap();
            prop_assert!(scan_dependencies(&out, &BTreeMap::new()).is_empty());
            prop_assert_eq!(out.len(), args.len());
        }

        #[test]
        fn wire_encoding_round_trips(v in arb_value()) {
            let mut buf = Vec::new();
            ciborium::into_writer(&v, &mut buf).unwrap();
            let back: ArgValue = ciborium::from_reader(buf.as_slice()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
