//! Run and benchmark reports.

use std::time::Duration;

use parflow_core::{AppFuture, ArgValue, TaskError};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Latencies {
    pub p50: f64,
    pub p95: f64,
}

/// Stable JSON report emitted by `run` and `bench`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Report {
    pub workflow: String,
    pub config_label: String,
    pub submitted: usize,
    pub completed: usize,
    pub failed: usize,
    pub wall_s: f64,
    pub tasks_per_s: f64,
    pub latencies_ms: Latencies,
    /// One entry per task: its value, or `{"error": kind, "message": ...}`.
    pub results: Vec<Value>,
}

impl Report {
    pub fn from_futures(
        workflow: &str,
        config_label: &str,
        futures: &[AppFuture],
        wall: Duration,
        keep_results: bool,
    ) -> Self {
        let mut completed = 0;
        let mut failed = 0;
        let mut results = Vec::new();
        for f in futures {
            let outcome = f.result();
            match &outcome {
                Ok(_) => completed += 1,
                Err(_) => failed += 1,
            }
            if keep_results {
                results.push(outcome_json(&outcome));
            }
        }
        let mut lat: Vec<f64> = futures
            .iter()
            .filter_map(|f| f.latency())
            .map(|d| d.as_secs_f64() * 1e3)
            .collect();
        lat.sort_by(f64::total_cmp);
        let wall_s = wall.as_secs_f64();
        Report {
            workflow: workflow.to_string(),
            config_label: config_label.to_string(),
            submitted: futures.len(),
            completed,
            failed,
            wall_s,
            tasks_per_s: if wall_s > 0.0 {
                futures.len() as f64 / wall_s
            } else {
                0.0
            },
            latencies_ms: Latencies {
                p50: percentile(&lat, 50.0),
                p95: percentile(&lat, 95.0),
            },
            results,
        }
    }

    pub fn text_summary(&self) -> String {
        format!(
            "workflow={} config={} submitted={} completed={} failed={} wall_s={:.3} tasks_per_s={:.1} p50_ms={:.3} p95_ms={:.3}",
            self.workflow,
            self.config_label,
            self.submitted,
            self.completed,
            self.failed,
            self.wall_s,
            self.tasks_per_s,
            self.latencies_ms.p50,
            self.latencies_ms.p95
        )
    }
}

/// Nearest-rank percentile of sorted samples; 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn outcome_json(outcome: &Result<ArgValue, TaskError>) -> Value {
    match outcome {
        Ok(v) => value_json(v),
        Err(e) => json!({ "error": e.kind.to_string(), "message": e.message }),
    }
}

pub fn value_json(v: &ArgValue) -> Value {
    match v {
        ArgValue::Null => Value::Null,
        ArgValue::Int(i) => json!(i),
        ArgValue::Real(r) => json!(r),
        ArgValue::Bool(b) => json!(b),
        ArgValue::Text(s) => json!(s),
        ArgValue::Bytes(b) | ArgValue::Blob(b) => json!(b),
        ArgValue::File(f) => json!(f
            .filepath()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| f.source().to_string())),
        ArgValue::Future(id) => json!({ "future": id.0 }),
        ArgValue::DataFuture(id, i) => json!({ "data_future": [id.0, i] }),
        ArgValue::List(items) => Value::Array(items.iter().map(value_json).collect()),
        ArgValue::Map(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), value_json(v))).collect()),
    }
}
