//! Launchers turn a worker command into the per-node commands of a block.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{worker_log, BlockId, CommandSpec};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LauncherKind {
    /// One worker host for the whole block.
    Single,
    /// One worker host on every node of the block.
    PerNode,
}

/// What a block should run on its nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LaunchSpec {
    /// Worker host command, e.g. `["parflow-worker"]`.
    pub command: Vec<String>,
    /// Pool address the hosts connect back to.
    pub addr: String,
    /// Task slots per worker host.
    pub slots: u32,
    pub heartbeat_ms: u64,
    pub env: Vec<(String, String)>,
    pub log_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug)]
pub struct Launcher {
    pub kind: LauncherKind,
}

impl Launcher {
    pub fn new(kind: LauncherKind) -> Self {
        Self { kind }
    }

    pub fn hosts(&self, nodes_per_block: usize) -> usize {
        match self.kind {
            LauncherKind::Single => 1,
            LauncherKind::PerNode => nodes_per_block.max(1),
        }
    }

    pub fn commands(&self, block: BlockId, nodes_per_block: usize, spec: &LaunchSpec) -> Vec<CommandSpec> {
        (0..self.hosts(nodes_per_block))
            .map(|i| {
                let (program, rest) = spec
                    .command
                    .split_first()
                    .map(|(p, r)| (p.clone(), r.to_vec()))
                    .unwrap_or_default();
                let mut args = rest;
                args.extend([
                    "--addr".to_string(),
                    spec.addr.clone(),
                    "--block-id".to_string(),
                    block.0.to_string(),
                    "--host-index".to_string(),
                    i.to_string(),
                    "--slots".to_string(),
                    spec.slots.to_string(),
                    "--heartbeat-ms".to_string(),
                    spec.heartbeat_ms.to_string(),
                ]);
                CommandSpec {
                    program,
                    args,
                    env: spec.env.clone(),
                    log: worker_log(&spec.log_dir, block, i),
                }
            })
            .collect()
    }
}
