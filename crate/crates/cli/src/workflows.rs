//! Demo workflows and the throughput benchmark.

use std::time::{Duration, Instant};

use parflow_core::app::builtins;
use parflow_core::{
    define_shell_app, wait_all, AppFuture, AppOptions, ArgValue, DataFlowKernel, FileRef, KernelError, ShellResult,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Workflow {
    Hello,
    SleepHello,
    Communicate,
    SortFile,
    Diamond,
}

impl Workflow {
    pub fn name(self) -> &'static str {
        match self {
            Workflow::Hello => "hello",
            Workflow::SleepHello => "sleep_hello",
            Workflow::Communicate => "communicate",
            Workflow::SortFile => "sort_file",
            Workflow::Diamond => "diamond",
        }
    }
}

pub struct RunOptions {
    pub input: String,
    pub sleep_s: f64,
}

/// What a workflow produced: its futures plus lines for the text report.
pub struct RunOutput {
    pub futures: Vec<AppFuture>,
    pub lines: Vec<String>,
    pub notes: Vec<String>,
}

fn text_of(v: &ArgValue) -> String {
    match v {
        ArgValue::Text(s) => s.clone(),
        other => match ShellResult::from_value(other) {
            Some(r) => r.stdout().map(|s| s.trim_end().to_string()).unwrap_or_default(),
            None => format!("{other:?}"),
        },
    }
}

pub fn run(k: &DataFlowKernel, wf: Workflow, opts: &RunOptions) -> Result<RunOutput, KernelError> {
    let mut notes = Vec::new();
    let futures = match wf {
        Workflow::Hello => {
            let echo = define_shell_app("echo_hello", r#"echo "Hello world""#, AppOptions::default())
                .expect("static template parses");
            vec![k.call(&builtins::hello(), vec![])?, k.call(&echo, vec![])?]
        }
        Workflow::SleepHello => {
            let start = Instant::now();
            let f = k.call(&builtins::hello_sleep(), vec![ArgValue::Real(opts.sleep_s)])?;
            let done = f.done();
            notes.push(format!(
                "done() after invocation: {done} (checked at {:.1} ms)",
                start.elapsed().as_secs_f64() * 1e3
            ));
            vec![f]
        }
        Workflow::Communicate => vec![k.call(&builtins::communicate(), vec!["bob".into()])?],
        Workflow::SortFile => {
            let input = if opts.input.contains("://") {
                FileRef::new(&opts.input)
            } else {
                FileRef::local(std::path::absolute(&opts.input).map_err(KernelError::Io)?)
            };
            vec![k.call(&builtins::sort_numbers(), vec![input.into()])?]
        }
        Workflow::Diamond => {
            let c = builtins::combine();
            let a = k.call(&c, vec![1.into()])?;
            let b = k.call(&c, vec![2.into(), (&a).into()])?;
            let cc = k.call(&c, vec![3.into(), (&a).into()])?;
            let d = k.call(&c, vec![4.into(), (&b).into(), (&cc).into()])?;
            vec![a, b, cc, d]
        }
    };
    wait_all(&futures, None)?;
    let mut lines = Vec::new();
    for f in &futures {
        match f.result() {
            Ok(ArgValue::List(items)) => lines.extend(items.iter().map(text_of)),
            Ok(v) => lines.push(text_of(&v)),
            Err(e) => lines.push(format!("task {} failed: {e}", f.task_id())),
        }
    }
    if wf == Workflow::SleepHello {
        notes.push(format!("done() after result: {}", futures[0].done()));
    }
    Ok(RunOutput { futures, lines, notes })
}

#[derive(Clone, Debug, PartialEq)]
pub enum BenchTask {
    Noop,
    Sleep(u64),
    ShellEcho,
}

impl std::str::FromStr for BenchTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "noop" => Ok(BenchTask::Noop),
            "shell_echo" => Ok(BenchTask::ShellEcho),
            _ => s
                .strip_prefix("sleep:")
                .and_then(|ms| ms.parse().ok())
                .map(BenchTask::Sleep)
                .ok_or_else(|| format!("expected noop, sleep:MS or shell_echo, got {s:?}")),
        }
    }
}

pub fn bench(k: &DataFlowKernel, n: usize, task: &BenchTask) -> Result<(Vec<AppFuture>, Duration), KernelError> {
    let echo = define_shell_app("echo", "echo {0}", AppOptions::default()).expect("static template parses");
    let start = Instant::now();
    let mut futures = Vec::with_capacity(n);
    for i in 0..n {
        let f = match task {
            BenchTask::Noop => k.call(&builtins::noop(), vec![])?,
            BenchTask::Sleep(ms) => k.call(&builtins::sleep_ms(), vec![(*ms as i64).into()])?,
            BenchTask::ShellEcho => k.call(&echo, vec![(i as i64).into()])?,
        };
        futures.push(f);
    }
    wait_all(&futures, None)?;
    Ok((futures, start.elapsed()))
}
