//! `parflow`: demo workflows, a throughput benchmark and config tooling.

mod report;
mod workflows;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use parflow_core::app::AppRegistry;
use parflow_core::config::{parse_table, ConfigError};
use parflow_core::executor::worker::{run_worker_host, WorkerHostArgs};
use parflow_core::{
    describe_options, load_config, validate_config, ConfigDocument, DataFlowKernel, ExecutorSpec, KernelBuilder,
    ShutdownMode,
};

use report::Report;
use workflows::{BenchTask, RunOptions, Workflow};

#[derive(Parser)]
#[command(
    name = "parflow",
    version,
    about = "Run dataflow workflows on configurable executors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file; defaults to a four-thread in-process executor.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
    /// Overrides the run directory from the configuration.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a demo workflow.
    Run {
        #[arg(value_enum)]
        workflow: Workflow,
        #[command(flatten)]
        common: Common,
        /// Input for sort_file: a local path or an http(s) URL.
        #[arg(long, default_value = "fixtures/unsorted.txt")]
        input: String,
        /// Seconds slept by sleep_hello.
        #[arg(long, default_value_t = 5.0)]
        sleep: f64,
    },
    /// Submit many identical tasks and report throughput.
    Bench {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        tasks: u64,
        /// noop, sleep:MS or shell_echo.
        #[arg(long, default_value = "noop")]
        task: BenchTask,
        #[command(flatten)]
        common: Common,
    },
    /// Check a configuration file and print its findings.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the configuration schema as JSON.
    Options {
        /// Print an example document instead.
        #[arg(long)]
        example: bool,
    },
    /// Worker host process started by worker-pool providers.
    #[command(hide = true)]
    Worker {
        #[command(flatten)]
        host: WorkerHostArgs,
    },
}

fn default_config() -> ConfigDocument {
    ConfigDocument {
        executors: vec![ExecutorSpec::in_process("local_threads", 4)],
        ..ConfigDocument::default()
    }
}

fn config_label(path: Option<&Path>) -> String {
    path.and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into())
}

fn start_kernel(common: &Common) -> Result<DataFlowKernel, ExitCode> {
    let doc = match &common.config {
        Some(p) => load_config(p).map_err(|e| {
            eprintln!("parflow: {e}");
            ExitCode::from(2)
        })?,
        None => default_config(),
    };
    let mut builder = KernelBuilder::from_config(&doc);
    if let Some(dir) = &common.run_dir {
        builder = builder.run_dir(dir);
    }
    if let Ok(exe) = std::env::current_exe() {
        builder = builder.worker_command(vec![exe.display().to_string(), "worker".into()]);
    }
    builder.build().map_err(|e| {
        eprintln!("parflow: cannot start: {e}");
        ExitCode::from(2)
    })
}

fn emit(report: &Report, format: ReportFormat, lines: &[String], notes: &[String]) {
    match format {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(report).expect("report serializes")),
        ReportFormat::Text => {
            for l in lines {
                println!("{l}");
            }
            for n in notes {
                eprintln!("{n}");
            }
            eprintln!("{}", report.text_summary());
        }
    }
}

fn exit_for(report: &Report) -> ExitCode {
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_run(wf: Workflow, common: Common, opts: RunOptions) -> ExitCode {
    let k = match start_kernel(&common) {
        Ok(k) => k,
        Err(code) => return code,
    };
    let start = std::time::Instant::now();
    let out = match workflows::run(&k, wf, &opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("parflow: {e}");
            return ExitCode::from(1);
        }
    };
    let wall = start.elapsed();
    k.shutdown(ShutdownMode::Drain);
    let label = config_label(common.config.as_deref());
    let report = Report::from_futures(wf.name(), &label, &out.futures, wall, true);
    let mut notes = out.notes;
    for f in &out.futures {
        let ms = f.latency().map(|d| d.as_secs_f64() * 1e3).unwrap_or(0.0);
        notes.push(format!("task {} {} {ms:.3} ms", f.task_id(), f.state()));
    }
    emit(&report, common.report, &out.lines, &notes);
    exit_for(&report)
}

fn cmd_bench(n: u64, task: BenchTask, common: Common) -> ExitCode {
    let k = match start_kernel(&common) {
        Ok(k) => k,
        Err(code) => return code,
    };
    let (futures, wall) = match workflows::bench(&k, n as usize, &task) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("parflow: {e}");
            return ExitCode::from(1);
        }
    };
    k.shutdown(ShutdownMode::Drain);
    let report = Report::from_futures("bench", &config_label(common.config.as_deref()), &futures, wall, false);
    emit(&report, common.report, &[], &[]);
    exit_for(&report)
}

fn cmd_validate(path: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("parflow: cannot read {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let table = match parse_table(&text) {
        Ok(t) => t,
        Err(e @ ConfigError::Parse { .. }) => {
            eprintln!("parflow: {}: {e}", path.display());
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("parflow: {e}");
            return ExitCode::from(2);
        }
    };
    let findings = validate_config(&table);
    for f in &findings {
        println!("{}: {}", f.path, f.message);
    }
    if findings.is_empty() {
        println!("{}: ok", path.display());
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            workflow,
            common,
            input,
            sleep,
        } => cmd_run(workflow, common, RunOptions { input, sleep_s: sleep }),
        Command::Bench { tasks, task, common } => cmd_bench(tasks, task, common),
        Command::Validate { config } => cmd_validate(&config),
        Command::Options { example } => {
            let schema = describe_options();
            if example {
                print!("{}", schema.example_document());
            } else {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&schema.to_json()).expect("schema serializes")
                );
            }
            ExitCode::SUCCESS
        }
        Command::Worker { host } => match run_worker_host(&host, AppRegistry::builtins()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("parflow worker: {e}");
                ExitCode::from(1)
            }
        },
    }
}
