//! Apps: the units of work a program invokes.
//!
//! A native app wraps a Rust function; a shell app wraps a command template
//! that is rendered with the invocation's arguments and run under `sh -c`.
//! Native functions receive everything they need through their arguments.

pub mod builtins;
mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;

pub use builtins::AppRegistry;
pub use template::{CommandTemplate, RenderError, TemplateError};

use crate::error::{ErrorKind, Outcome, TaskError};
use crate::staging::FileRef;
use crate::task::ArgValue;

/// Error raised by a native app.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppError(pub String);

impl AppError {
    pub fn new(msg: impl Into<String>) -> Self {
        AppError(msg.into())
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AppError {}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError(e.to_string())
    }
}

impl From<String> for AppError {
    fn from(s: String) -> Self {
        AppError(s)
    }
}

impl From<&str> for AppError {
    fn from(s: &str) -> Self {
        AppError(s.to_string())
    }
}

/// Arguments as seen by a native function. The reserved `outputs` keyword
/// never appears in `kwargs`; declared outputs arrive in `outputs`, staged.
pub struct Call<'a> {
    pub args: &'a [ArgValue],
    pub kwargs: &'a BTreeMap<String, ArgValue>,
    pub outputs: &'a [FileRef],
}

impl Call<'_> {
    pub fn arg(&self, i: usize) -> Result<&ArgValue, AppError> {
        self.args
            .get(i)
            .ok_or_else(|| AppError(format!("missing positional argument {i}")))
    }

    pub fn int(&self, i: usize) -> Result<i64, AppError> {
        let v = self.arg(i)?;
        v.as_int()
            .ok_or_else(|| AppError(format!("argument {i} must be an int, got {}", v.type_name())))
    }

    pub fn text(&self, i: usize) -> Result<&str, AppError> {
        let v = self.arg(i)?;
        v.as_text()
            .ok_or_else(|| AppError(format!("argument {i} must be text, got {}", v.type_name())))
    }

    pub fn file(&self, i: usize) -> Result<&FileRef, AppError> {
        let v = self.arg(i)?;
        v.as_file()
            .ok_or_else(|| AppError(format!("argument {i} must be a file, got {}", v.type_name())))
    }

    pub fn kwarg(&self, name: &str) -> Option<&ArgValue> {
        self.kwargs.get(name)
    }
}

pub type NativeFn = Arc<dyn Fn(&Call<'_>) -> Result<ArgValue, AppError> + Send + Sync>;

#[derive(Clone)]
pub enum AppKind {
    Native { name: String, callable: NativeFn },
    Shell { name: String, template: CommandTemplate },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AppOptions {
    /// Executor to run on; the kernel's first executor when unset.
    pub executor_label: Option<String>,
    /// Overrides the kernel's retry budget for this app.
    pub retries: Option<u32>,
}

impl AppOptions {
    pub fn on(label: impl Into<String>) -> Self {
        Self {
            executor_label: Some(label.into()),
            retries: None,
        }
    }
}

#[derive(Clone)]
pub struct AppSpec {
    kind: AppKind,
    options: AppOptions,
}

impl AppSpec {
    pub fn name(&self) -> &str {
        match &self.kind {
            AppKind::Native { name, .. } | AppKind::Shell { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &AppKind {
        &self.kind
    }

    pub fn options(&self) -> &AppOptions {
        &self.options
    }

    pub fn is_shell(&self) -> bool {
        matches!(self.kind, AppKind::Shell { .. })
    }

    pub fn with_options(mut self, options: AppOptions) -> Self {
        self.options = options;
        self
    }
}

impl fmt::Debug for AppSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.is_shell() { "shell" } else { "native" };
        f.debug_struct("AppSpec")
            .field("name", &self.name())
            .field("kind", &kind)
            .field("options", &self.options)
            .finish()
    }
}

/// Wraps a Rust function as an app.
///
/// `name` identifies the function to worker processes, which can only run
/// functions present in their own [`AppRegistry`].
pub fn define_native_app<F>(name: impl Into<String>, f: F, options: AppOptions) -> AppSpec
where
    F: Fn(&Call<'_>) -> Result<ArgValue, AppError> + Send + Sync + 'static,
{
    AppSpec {
        kind: AppKind::Native {
            name: name.into(),
            callable: Arc::new(f),
        },
        options,
    }
}

pub(crate) fn native_from_fn(name: &str, callable: NativeFn, options: AppOptions) -> AppSpec {
    AppSpec {
        kind: AppKind::Native {
            name: name.to_string(),
            callable,
        },
        options,
    }
}

/// Wraps a command template as an app. The template is checked for
/// well-formed placeholders here; binding happens per invocation.
pub fn define_shell_app(
    name: impl Into<String>,
    template: &str,
    options: AppOptions,
) -> Result<AppSpec, TemplateError> {
    Ok(AppSpec {
        kind: AppKind::Shell {
            name: name.into(),
            template: CommandTemplate::parse(template)?,
        },
        options,
    })
}

pub fn render_command(
    template: &str,
    args: &[ArgValue],
    kwargs: &BTreeMap<String, ArgValue>,
    inputs: &[FileRef],
    outputs: &[FileRef],
) -> Result<String, RenderError> {
    CommandTemplate::parse(template)?.render(args, kwargs, inputs, outputs)
}

/// What a successful shell task resolves to.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellResult {
    pub exit_code: i32,
    pub stdout_file: FileRef,
    pub stderr_file: FileRef,
}

impl ShellResult {
    pub fn to_value(&self) -> ArgValue {
        ArgValue::Map(BTreeMap::from([
            ("exit_code".to_string(), ArgValue::Int(self.exit_code.into())),
            ("stdout".to_string(), ArgValue::File(self.stdout_file.clone())),
            ("stderr".to_string(), ArgValue::File(self.stderr_file.clone())),
        ]))
    }

    pub fn from_value(v: &ArgValue) -> Option<Self> {
        let ArgValue::Map(m) = v else { return None };
        Some(Self {
            exit_code: m.get("exit_code")?.as_int()? as i32,
            stdout_file: m.get("stdout")?.as_file()?.clone(),
            stderr_file: m.get("stderr")?.as_file()?.clone(),
        })
    }

    /// Captured standard output.
    pub fn stdout(&self) -> std::io::Result<String> {
        let p = self.stdout_file.filepath().map_err(std::io::Error::other)?;
        std::fs::read_to_string(p)
    }
}

/// Runs a native function, turning errors and panics into error outcomes.
pub(crate) fn run_native(callable: &NativeFn, call: &Call<'_>) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(|| callable(call))) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(TaskError::app(e.0)),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(TaskError::app(format!("app panicked: {msg}")))
        }
    }
}

/// Runs a rendered command under `sh -c`, capturing output to the given
/// files. Success is judged by exit status alone.
pub(crate) fn run_shell(command: &str, cwd: &Path, stdout: &Path, stderr: &Path) -> Outcome {
    let io_err = |what: &str, e: std::io::Error| TaskError::app(format!("{what}: {e}"));
    for p in [stdout, stderr] {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err("creating capture directory", e))?;
        }
    }
    let out = File::create(stdout).map_err(|e| io_err("creating stdout file", e))?;
    let err = File::create(stderr).map_err(|e| io_err("creating stderr file", e))?;
    let status = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .status()
        .map_err(|e| io_err("spawning shell", e))?;
    let code = exit_code(&status);
    let staged = |p: &Path| FileRef::local(p).with_staged_path(p.to_path_buf());
    if code == 0 {
        Ok(ShellResult {
            exit_code: 0,
            stdout_file: staged(stdout),
            stderr_file: staged(stderr),
        }
        .to_value())
    } else {
        Err(TaskError::new(
            ErrorKind::ExitCode(code),
            format!("command exited with status {code}: {command}"),
        ))
    }
}

#[cfg(unix)]
fn exit_code(status: &std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_code(status: &std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}
