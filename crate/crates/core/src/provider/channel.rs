//! Channels run commands where a provider's resources live. Only the local
//! machine is supported.

use std::fs::File;
use std::io;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Local,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommandSpec {
    pub program: String,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    /// Combined stdout and stderr destination for spawned processes.
    pub log: Option<PathBuf>,
}

impl CommandSpec {
    pub fn new(program: impl Into<String>) -> Self {
        Self {
            program: program.into(),
            ..Self::default()
        }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(&self.args);
        for (k, v) in &self.env {
            cmd.env(k, v);
        }
        cmd
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub trait Channel: Send + Sync {
    fn execute_wait(&self, cmd: &CommandSpec) -> io::Result<CommandOutput>;
    fn spawn(&self, cmd: &CommandSpec) -> io::Result<Child>;
}

#[derive(Clone, Debug, Default)]
pub struct LocalChannel;

impl Channel for LocalChannel {
    fn execute_wait(&self, cmd: &CommandSpec) -> io::Result<CommandOutput> {
        let out = cmd.command().stdin(Stdio::null()).output()?;
        Ok(CommandOutput {
            exit_code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        })
    }

    fn spawn(&self, cmd: &CommandSpec) -> io::Result<Child> {
        let mut c = cmd.command();
        c.stdin(Stdio::null());
        match &cmd.log {
            Some(path) => {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let f = File::create(path)?;
                c.stdout(f.try_clone()?).stderr(f);
            }
            None => {
                c.stdout(Stdio::null()).stderr(Stdio::null());
            }
        }
        c.spawn()
    }
}
