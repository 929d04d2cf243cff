//! Worker host process for worker-pool executors.

use clap::Parser;
use parflow_core::app::AppRegistry;
use parflow_core::executor::worker::{run_worker_host, WorkerHostArgs};

#[derive(Parser)]
#[command(name = "parflow-worker", about = "Runs tasks for a parflow worker pool")]
struct Cli {
    #[command(flatten)]
    host: WorkerHostArgs,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run_worker_host(&cli.host, AppRegistry::builtins()) {
        eprintln!("parflow-worker: {e}");
        std::process::exit(1);
    }
}
