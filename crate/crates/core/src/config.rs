//! Runtime configuration documents.
//!
//! A configuration is a TOML file loaded at run time, keeping execution
//! resources out of program code:
//!
//! ```toml
//! retries = 1
//! run_dir = "runinfo"
//!
//! [strategy]
//! poll_interval_s = 1.0
//! idle_timeout_s = 60.0
//!
//! [[executors]]
//! label = "htex"
//! kind = "worker_pool"          # or "in_process"
//! max_workers = 4               # task slots per node
//!
//! [executors.provider]
//! kind = "sim_batch"            # or "local"
//! nodes_per_block = 2
//! init_blocks = 1
//! max_blocks = 4
//! queue_delay_s = 2.0
//! launcher = "per_node"         # or "single"
//! ```
//!
//! [`describe_options`] lists every key with its type, default and
//! constraint. [`validate_config`] reports problems as findings carrying the
//! offending key path, e.g. `executors[1].label`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use toml::{Table, Value};

use crate::executor::{ExecutorKind, ExecutorSpec, StrategyParams};
use crate::provider::sim_batch::PARTITIONS;
use crate::provider::{ChannelKind, LauncherKind, ProviderKind, ProviderSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub path: String,
    pub message: String,
}

impl Finding {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {}", join_findings(.0))]
    Invalid(Vec<Finding>),
}

fn join_findings(f: &[Finding]) -> String {
    f.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub poll_interval_s: f64,
    pub idle_timeout_s: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            poll_interval_s: 1.0,
            idle_timeout_s: 60.0,
        }
    }
}

/// A loaded configuration with defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigDocument {
    pub retries: u32,
    /// Pause before a failed task is retried.
    pub retry_delay_s: f64,
    pub run_dir: PathBuf,
    pub strategy: StrategyConfig,
    pub executors: Vec<ExecutorSpec>,
}

impl Default for ConfigDocument {
    fn default() -> Self {
        Self {
            retries: 0,
            retry_delay_s: 0.0,
            run_dir: PathBuf::from("runinfo"),
            strategy: StrategyConfig::default(),
            executors: Vec::new(),
        }
    }
}

impl ConfigDocument {
    pub fn strategy_params(&self) -> StrategyParams {
        StrategyParams {
            poll_interval: Duration::from_secs_f64(self.strategy.poll_interval_s.max(0.0)),
            idle_timeout: Duration::from_secs_f64(self.strategy.idle_timeout_s.max(0.0)),
        }
    }

    pub fn executor(&self, label: &str) -> Option<&ExecutorSpec> {
        self.executors.iter().find(|e| e.label == label)
    }

    /// The document as a TOML table using the documented keys.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        t.insert("retries".into(), Value::Integer(self.retries.into()));
        t.insert("retry_delay_s".into(), Value::Float(self.retry_delay_s));
        t.insert(
            "run_dir".into(),
            Value::String(self.run_dir.to_string_lossy().into_owned()),
        );
        let mut s = Table::new();
        s.insert("poll_interval_s".into(), Value::Float(self.strategy.poll_interval_s));
        s.insert("idle_timeout_s".into(), Value::Float(self.strategy.idle_timeout_s));
        t.insert("strategy".into(), Value::Table(s));
        let execs = self
            .executors
            .iter()
            .map(|e| {
                let mut x = Table::new();
                x.insert("label".into(), Value::String(e.label.clone()));
                x.insert(
                    "kind".into(),
                    Value::String(
                        match e.kind {
                            ExecutorKind::InProcess => "in_process",
                            ExecutorKind::WorkerPool => "worker_pool",
                        }
                        .into(),
                    ),
                );
                x.insert("max_workers".into(), Value::Integer(e.max_workers as i64));
                if let Some(a) = &e.address {
                    x.insert("address".into(), Value::String(a.clone()));
                }
                if let Some(p) = &e.provider {
                    x.insert("provider".into(), Value::Table(provider_table(p)));
                }
                Value::Table(x)
            })
            .collect();
        t.insert("executors".into(), Value::Array(execs));
        t
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&self.to_table()).unwrap_or_default()
    }

    /// Findings for a document built in code.
    pub fn validate(&self) -> Vec<Finding> {
        validate_config(&self.to_table())
    }
}

fn provider_table(p: &ProviderSpec) -> Table {
    let mut t = Table::new();
    let kind = match p.kind {
        ProviderKind::Local => "local",
        ProviderKind::SimBatch => "sim_batch",
    };
    t.insert("kind".into(), Value::String(kind.into()));
    t.insert("nodes_per_block".into(), Value::Integer(p.nodes_per_block as i64));
    t.insert("init_blocks".into(), Value::Integer(p.init_blocks as i64));
    t.insert("min_blocks".into(), Value::Integer(p.min_blocks as i64));
    t.insert("max_blocks".into(), Value::Integer(p.max_blocks as i64));
    t.insert("partition".into(), Value::String(p.partition.clone()));
    t.insert("queue_delay_s".into(), Value::Float(p.queue_delay_s));
    t.insert("queue_delay_jitter_s".into(), Value::Float(p.queue_delay_jitter_s));
    t.insert("seed".into(), Value::Integer(p.seed as i64));
    let launcher = match p.launcher {
        LauncherKind::Single => "single",
        LauncherKind::PerNode => "per_node",
    };
    t.insert("launcher".into(), Value::String(launcher.into()));
    t.insert("channel".into(), Value::String("local".into()));
    t
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Integer,
    Number,
    String,
    Table,
    ArrayOfTables,
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Check {
    Int { min: i64 },
    Num { min: f64, strict: bool },
    Text,
    OneOf(&'static [&'static str]),
    Table,
    Tables,
}

/// One documented configuration key.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptionInfo {
    pub key: &'static str,
    #[serde(rename = "type")]
    pub value_type: ValueType,
    pub required: bool,
    pub default: Option<&'static str>,
    pub constraint: String,
    pub description: &'static str,
    #[serde(skip)]
    check: Check,
}

const EXECUTOR_KINDS: &[&str] = &["in_process", "worker_pool"];
const PROVIDER_KINDS: &[&str] = &["local", "sim_batch"];
const LAUNCHERS: &[&str] = &["single", "per_node"];
const CHANNELS: &[&str] = &["local"];

fn opt(
    key: &'static str,
    check: Check,
    required: bool,
    default: Option<&'static str>,
    description: &'static str,
) -> OptionInfo {
    let (value_type, constraint) = match check {
        Check::Int { min } => (ValueType::Integer, format!(">= {min}")),
        Check::Num { min, strict: true } => (ValueType::Number, format!("> {min}")),
        Check::Num { min, strict: false } => (ValueType::Number, format!(">= {min}")),
        Check::Text => (ValueType::String, "non-empty".to_string()),
        Check::OneOf(options) => (ValueType::String, format!("one of {}", options.join(", "))),
        Check::Table => (ValueType::Table, String::new()),
        Check::Tables => (ValueType::ArrayOfTables, "at least one entry".to_string()),
    };
    OptionInfo {
        key,
        value_type,
        required,
        default,
        constraint,
        description,
        check,
    }
}

fn options() -> Vec<OptionInfo> {
    use Check::*;
    vec![
        opt(
            "retries",
            Int { min: 0 },
            false,
            Some("0"),
            "Extra attempts for a failed task.",
        ),
        opt(
            "retry_delay_s",
            Num {
                min: 0.0,
                strict: false,
            },
            false,
            Some("0"),
            "Pause before each retry.",
        ),
        opt(
            "run_dir",
            Text,
            false,
            Some("runinfo"),
            "Run directory for logs, staging and task output.",
        ),
        opt("strategy", Table, false, None, "Block scaling policy of worker pools."),
        opt(
            "strategy.poll_interval_s",
            Num { min: 0.0, strict: true },
            false,
            Some("1"),
            "Seconds between scaling decisions.",
        ),
        opt(
            "strategy.idle_timeout_s",
            Num {
                min: 0.0,
                strict: false,
            },
            false,
            Some("60"),
            "Idle seconds before a block is released.",
        ),
        opt(
            "executors",
            Tables,
            true,
            None,
            "Execution backends; tasks default to the first.",
        ),
        opt(
            "executors[].label",
            Text,
            true,
            None,
            "Unique executor name apps refer to.",
        ),
        opt(
            "executors[].kind",
            OneOf(EXECUTOR_KINDS),
            true,
            None,
            "Executor implementation.",
        ),
        opt(
            "executors[].max_workers",
            Int { min: 1 },
            false,
            Some("1"),
            "Concurrent tasks per node.",
        ),
        opt(
            "executors[].address",
            Text,
            false,
            Some("127.0.0.1"),
            "Worker pool address; recorded, the listener binds loopback.",
        ),
        opt(
            "executors[].provider",
            Table,
            false,
            None,
            "Resource provider; required for worker_pool.",
        ),
        opt(
            "executors[].provider.kind",
            OneOf(PROVIDER_KINDS),
            false,
            Some("local"),
            "Where blocks come from.",
        ),
        opt(
            "executors[].provider.nodes_per_block",
            Int { min: 1 },
            false,
            Some("1"),
            "Nodes in each block.",
        ),
        opt(
            "executors[].provider.init_blocks",
            Int { min: 0 },
            false,
            Some("1"),
            "Blocks requested at start.",
        ),
        opt(
            "executors[].provider.min_blocks",
            Int { min: 0 },
            false,
            Some("0"),
            "Blocks kept when idle.",
        ),
        opt(
            "executors[].provider.max_blocks",
            Int { min: 1 },
            false,
            Some("1"),
            "Upper bound on active blocks.",
        ),
        opt(
            "executors[].provider.partition",
            OneOf(&PARTITIONS),
            false,
            Some("normal"),
            "Simulated queue profile.",
        ),
        opt(
            "executors[].provider.queue_delay_s",
            Num {
                min: 0.0,
                strict: false,
            },
            false,
            Some("0"),
            "Mean simulated queue wait.",
        ),
        opt(
            "executors[].provider.queue_delay_jitter_s",
            Num {
                min: 0.0,
                strict: false,
            },
            false,
            Some("0"),
            "Half-width of uniform spread around the wait.",
        ),
        opt(
            "executors[].provider.seed",
            Int { min: 0 },
            false,
            Some("0"),
            "Seed of the simulated queue.",
        ),
        opt(
            "executors[].provider.launcher",
            OneOf(LAUNCHERS),
            false,
            Some("per_node"),
            "How worker hosts start in a block.",
        ),
        opt(
            "executors[].provider.channel",
            OneOf(CHANNELS),
            false,
            Some("local"),
            "How provider commands run.",
        ),
    ]
}

/// Machine-readable description of every configuration key.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptionSchema {
    pub options: Vec<OptionInfo>,
}

impl OptionSchema {
    pub fn get(&self, key: &str) -> Option<&OptionInfo> {
        self.options.iter().find(|o| o.key == key)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("schema serializes")
    }

    /// A document setting every key with a default to that default, plus
    /// one example executor of each kind.
    pub fn example_document(&self) -> String {
        let mut text = String::new();
        for o in &self.options {
            if !o.key.contains('.') && !o.key.contains('[') {
                if let Some(d) = o.default {
                    text.push_str(&format!("{} = {}\n", o.key, literal(o, d)));
                }
            }
        }
        text.push_str("\n[strategy]\n");
        for o in self.options.iter().filter(|o| o.key.starts_with("strategy.")) {
            text.push_str(&format!("{} = {}\n", &o.key[9..], literal(o, o.default.unwrap_or("0"))));
        }
        text.push_str("\n[[executors]]\nlabel = \"threads\"\nkind = \"in_process\"\nmax_workers = 1\n");
        text.push_str("\n[[executors]]\nlabel = \"pool\"\nkind = \"worker_pool\"\n");
        for o in &self.options {
            if let Some(k) = o.key.strip_prefix("executors[].") {
                if !k.contains('.') && k != "label" && k != "kind" {
                    if let Some(d) = o.default {
                        text.push_str(&format!("{k} = {}\n", literal(o, d)));
                    }
                }
            }
        }
        text.push_str("\n[executors.provider]\n");
        for o in &self.options {
            if let Some(k) = o.key.strip_prefix("executors[].provider.") {
                if let Some(d) = o.default {
                    text.push_str(&format!("{k} = {}\n", literal(o, d)));
                }
            }
        }
        text
    }
}

fn literal(o: &OptionInfo, d: &str) -> String {
    match o.value_type {
        ValueType::String => format!("{d:?}"),
        _ => d.to_string(),
    }
}

pub fn describe_options() -> OptionSchema {
    OptionSchema { options: options() }
}

fn schema_key(path: &str) -> String {
    // executors[3].provider.kind -> executors[].provider.kind
    let mut out = String::new();
    let mut skipping = false;
    for c in path.chars() {
        match c {
            '[' => {
                skipping = true;
                out.push('[');
            }
            ']' => {
                skipping = false;
                out.push(']');
            }
            _ if skipping => {}
            _ => out.push(c),
        }
    }
    out
}

fn check_value(path: &str, check: Check, v: &Value, out: &mut Vec<Finding>) {
    let bad_type = |want: &str| Finding::new(path, format!("expected {want}, found {}", v.type_str()));
    match check {
        Check::Int { min } => match v.as_integer() {
            Some(i) if i < min => out.push(Finding::new(path, format!("must be >= {min}, got {i}"))),
            Some(_) => {}
            None => out.push(bad_type("an integer")),
        },
        Check::Num { min, strict } => {
            let n = v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
            match n {
                Some(x) if !x.is_finite() || x < min || (strict && x == min) => {
                    let op = if strict { ">" } else { ">=" };
                    out.push(Finding::new(path, format!("must be {op} {min}, got {x}")));
                }
                Some(_) => {}
                None => out.push(bad_type("a number")),
            }
        }
        Check::Text => match v.as_str() {
            Some(s) if s.trim().is_empty() => out.push(Finding::new(path, "must not be empty")),
            Some(_) => {}
            None => out.push(bad_type("a string")),
        },
        Check::OneOf(options) => match v.as_str() {
            Some(s) if !options.contains(&s) => out.push(Finding::new(
                path,
                format!("unknown value '{s}'; expected one of {}", options.join(", ")),
            )),
            Some(_) => {}
            None => out.push(bad_type("a string")),
        },
        Check::Table => {
            if !v.is_table() {
                out.push(bad_type("a table"));
            }
        }
        Check::Tables => match v.as_array() {
            Some(a) if a.is_empty() => out.push(Finding::new(path, "at least one entry is required")),
            Some(a) if a.iter().all(Value::is_table) => {}
            _ => out.push(bad_type("an array of tables")),
        },
    }
}

fn walk(prefix: &str, table: &Table, schema: &OptionSchema, out: &mut Vec<Finding>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        let Some(info) = schema.get(&schema_key(&path)) else {
            out.push(Finding::new(&path, "unknown key"));
            continue;
        };
        let before = out.len();
        check_value(&path, info.check, v, out);
        if out.len() > before {
            continue;
        }
        match v {
            Value::Table(t) => walk(&path, t, schema, out),
            Value::Array(items) if info.check == Check::Tables => {
                for (i, item) in items.iter().enumerate() {
                    if let Value::Table(t) = item {
                        walk(&format!("{path}[{i}]"), t, schema, out);
                    }
                }
            }
            _ => {}
        }
    }
    // Required keys of this table.
    let here = schema_key(prefix);
    for o in schema.options.iter().filter(|o| o.required) {
        let (parent, leaf) = match o.key.rsplit_once('.') {
            Some((p, l)) => (p.to_string(), l),
            None => (String::new(), o.key),
        };
        if parent == here && !table.contains_key(leaf) {
            let path = if prefix.is_empty() {
                leaf.to_string()
            } else {
                format!("{prefix}.{leaf}")
            };
            out.push(Finding::new(path, "required key is missing"));
        }
    }
}

fn int_at(t: &Table, key: &str, default: i64) -> i64 {
    t.get(key).and_then(Value::as_integer).unwrap_or(default)
}

/// Checks a parsed document against the documented key tree. Returns no
/// findings exactly when [`load_config`] would accept it.
pub fn validate_config(doc: &Table) -> Vec<Finding> {
    let schema = describe_options();
    let mut out = Vec::new();
    walk("", doc, &schema, &mut out);

    let Some(Value::Array(execs)) = doc.get("executors") else {
        return out;
    };
    let mut labels = BTreeSet::new();
    for (i, e) in execs.iter().enumerate() {
        let Value::Table(e) = e else { continue };
        let base = format!("executors[{i}]");
        if let Some(label) = e.get("label").and_then(Value::as_str) {
            if !labels.insert(label.to_string()) {
                out.push(Finding::new(
                    format!("{base}.label"),
                    format!("duplicate label '{label}'"),
                ));
            }
        }
        let kind = e.get("kind").and_then(Value::as_str);
        let provider = e.get("provider").and_then(Value::as_table);
        match (kind, provider) {
            (Some("worker_pool"), None) if !e.contains_key("provider") => out.push(Finding::new(
                format!("{base}.provider"),
                "worker_pool executors need a provider",
            )),
            (Some("in_process"), Some(_)) => out.push(Finding::new(
                format!("{base}.provider"),
                "in_process executors take no provider",
            )),
            _ => {}
        }
        if let Some(p) = provider {
            let pbase = format!("{base}.provider");
            let init = int_at(p, "init_blocks", 1);
            let min = int_at(p, "min_blocks", 0);
            let max = int_at(p, "max_blocks", 1);
            if init > max {
                out.push(Finding::new(
                    format!("{pbase}.init_blocks"),
                    format!("init_blocks ({init}) exceeds max_blocks ({max})"),
                ));
            }
            if min > init {
                out.push(Finding::new(
                    format!("{pbase}.min_blocks"),
                    format!("min_blocks ({min}) exceeds init_blocks ({init})"),
                ));
            }
        }
    }
    out
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse_table(text: &str) -> Result<Table, ConfigError> {
    toml::from_str::<Table>(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let table = parse_table(text)?;
    let findings = validate_config(&table);
    if !findings.is_empty() {
        return Err(ConfigError::Invalid(findings));
    }
    Ok(build_document(&table))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigDocument, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

fn num(t: &Table, key: &str, default: f64) -> f64 {
    match t.get(key) {
        Some(Value::Float(f)) => *f,
        Some(Value::Integer(i)) => *i as f64,
        _ => default,
    }
}

fn text<'a>(t: &'a Table, key: &str, default: &'a str) -> &'a str {
    t.get(key).and_then(Value::as_str).unwrap_or(default)
}

/// Builds the typed document from a table that passed validation.
fn build_document(t: &Table) -> ConfigDocument {
    let empty = Table::new();
    let strategy = t.get("strategy").and_then(Value::as_table).unwrap_or(&empty);
    let executors = t
        .get("executors")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_table).map(build_executor).collect())
        .unwrap_or_default();
    ConfigDocument {
        retries: int_at(t, "retries", 0) as u32,
        retry_delay_s: num(t, "retry_delay_s", 0.0),
        run_dir: PathBuf::from(text(t, "run_dir", "runinfo")),
        strategy: StrategyConfig {
            poll_interval_s: num(strategy, "poll_interval_s", 1.0),
            idle_timeout_s: num(strategy, "idle_timeout_s", 60.0),
        },
        executors,
    }
}

fn build_executor(e: &Table) -> ExecutorSpec {
    let kind = match text(e, "kind", "in_process") {
        "worker_pool" => ExecutorKind::WorkerPool,
        _ => ExecutorKind::InProcess,
    };
    let provider = e.get("provider").and_then(Value::as_table).map(|p| ProviderSpec {
        kind: match text(p, "kind", "local") {
            "sim_batch" => ProviderKind::SimBatch,
            _ => ProviderKind::Local,
        },
        nodes_per_block: int_at(p, "nodes_per_block", 1) as usize,
        init_blocks: int_at(p, "init_blocks", 1) as usize,
        min_blocks: int_at(p, "min_blocks", 0) as usize,
        max_blocks: int_at(p, "max_blocks", 1) as usize,
        partition: text(p, "partition", "normal").to_string(),
        launcher: match text(p, "launcher", "per_node") {
            "single" => LauncherKind::Single,
            _ => LauncherKind::PerNode,
        },
        channel: ChannelKind::Local,
        queue_delay_s: num(p, "queue_delay_s", 0.0),
        queue_delay_jitter_s: num(p, "queue_delay_jitter_s", 0.0),
        seed: int_at(p, "seed", 0) as u64,
    });
    let address = match kind {
        ExecutorKind::WorkerPool => Some(text(e, "address", "127.0.0.1").to_string()),
        ExecutorKind::InProcess => e.get("address").and_then(Value::as_str).map(str::to_string),
    };
    ExecutorSpec {
        label: text(e, "label", "").to_string(),
        kind,
        max_workers: int_at(e, "max_workers", 1) as usize,
        address,
        provider,
    }
}
