//! Location-abstracted files and the machinery that stages them.
//!
//! A [`FileRef`] names a file by where it comes from (a local path or an
//! http(s) URL). Before a task runs, inputs are staged so that
//! [`FileRef::filepath`] points at a readable local copy; after it runs,
//! declared outputs are checked at their staged location.
//!
//! Layout under the run directory: `staging/<task_id>/<basename>`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{ErrorKind, TaskError};
use crate::task::TaskId;

pub const HTTP_TIMEOUT: Duration = Duration::from_secs(30);
pub const MAX_REDIRECTS: u32 = 5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    Local,
    Http,
    Https,
}

impl Scheme {
    pub fn is_remote(self) -> bool {
        !matches!(self, Scheme::Local)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FileRef {
    scheme: Scheme,
    source: String,
    staged_path: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum StagingError {
    #[error("file {0} has not been staged")]
    NotStaged(String),
    #[error("input file {0} does not exist or is not readable")]
    NotFound(PathBuf),
    #[error("fetching {url} failed with HTTP status {status}")]
    HttpStatus { url: String, status: u16 },
    #[error("fetching {url} failed: {message}")]
    Transfer { url: String, message: String },
    #[error("{0} outputs are not supported; outputs must be local paths")]
    RemoteOutput(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<StagingError> for TaskError {
    fn from(e: StagingError) -> Self {
        TaskError::new(ErrorKind::Staging, e.to_string())
    }
}

impl FileRef {
    /// Parses a location: `http://` and `https://` URLs, `file://` URLs, or
    /// plain paths.
    pub fn new(location: &str) -> Self {
        let (scheme, source) = if location.starts_with("https://") {
            (Scheme::Https, location.to_string())
        } else if location.starts_with("http://") {
            (Scheme::Http, location.to_string())
        } else if let Some(path) = location.strip_prefix("file://") {
            (Scheme::Local, path.to_string())
        } else {
            (Scheme::Local, location.to_string())
        };
        Self {
            scheme,
            source,
            staged_path: None,
        }
    }

    pub fn local(path: impl AsRef<Path>) -> Self {
        Self {
            scheme: Scheme::Local,
            source: path.as_ref().to_string_lossy().into_owned(),
            staged_path: None,
        }
    }

    /// Parses `location`, resolving a relative local path against `base`.
    pub fn relative_to(location: &str, base: &Path) -> Self {
        Self::new(location).resolved_against(base)
    }

    pub(crate) fn resolved_against(mut self, base: &Path) -> Self {
        if self.scheme == Scheme::Local && Path::new(&self.source).is_relative() {
            self.source = base.join(&self.source).to_string_lossy().into_owned();
        }
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Final path component of the source, without query or fragment.
    pub fn basename(&self) -> String {
        match self.scheme {
            Scheme::Local => Path::new(&self.source)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            Scheme::Http | Scheme::Https => {
                let rest = self.source.split_once("://").map_or(self.source.as_str(), |(_, r)| r);
                let path = rest.split(['?', '#']).next().unwrap_or_default();
                match path.split_once('/') {
                    Some((_, p)) => p.rsplit('/').next().unwrap_or_default().to_string(),
                    None => String::new(),
                }
            }
        }
    }

    pub fn is_staged(&self) -> bool {
        self.staged_path.is_some()
    }

    /// Location of the file on the executing filesystem. Only defined once staged.
    pub fn filepath(&self) -> Result<&Path, StagingError> {
        self.staged_path
            .as_deref()
            .ok_or_else(|| StagingError::NotStaged(self.source.clone()))
    }

    pub(crate) fn with_staged_path(mut self, path: PathBuf) -> Self {
        self.staged_path = Some(path);
        self
    }

    fn local_path(&self, base: &Path) -> PathBuf {
        let p = Path::new(&self.source);
        if p.is_relative() {
            base.join(p)
        } else {
            p.to_path_buf()
        }
    }
}

/// Stages files for the tasks of one run directory.
pub struct Stager {
    run_dir: PathBuf,
    agent: ureq::Agent,
    fetches: AtomicUsize,
}

impl Stager {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(HTTP_TIMEOUT))
            .max_redirects(MAX_REDIRECTS)
            .build()
            .into();
        Self {
            run_dir: run_dir.into(),
            agent,
            fetches: AtomicUsize::new(0),
        }
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    /// Number of remote fetches performed so far.
    pub fn fetch_count(&self) -> usize {
        self.fetches.load(Ordering::Relaxed)
    }

    pub fn task_dir(&self, task: TaskId) -> PathBuf {
        self.run_dir.join("staging").join(task.to_string())
    }

    /// Makes `file` readable locally for `task` and returns it with its
    /// staged path filled in.
    ///
    /// Local files are used in place. Remote files are downloaded into the
    /// task's staging directory; a file already present there is reused.
    pub fn stage_in(&self, file: &FileRef, task: TaskId) -> Result<FileRef, StagingError> {
        match file.scheme {
            Scheme::Local => {
                let path = file.local_path(&self.run_dir);
                match fs::metadata(&path) {
                    Ok(m) if m.is_file() => Ok(file.clone().with_staged_path(path)),
                    _ => Err(StagingError::NotFound(path)),
                }
            }
            Scheme::Http | Scheme::Https => {
                let dir = self.task_dir(task);
                let dest = dir.join(file.basename());
                if dest.is_file() {
                    return Ok(file.clone().with_staged_path(dest));
                }
                fs::create_dir_all(&dir)?;
                self.fetch(&file.source, &dest)?;
                Ok(file.clone().with_staged_path(dest))
            }
        }
    }

    fn fetch(&self, url: &str, dest: &Path) -> Result<(), StagingError> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        let mut response = match self.agent.get(url).call() {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(status)) => {
                return Err(StagingError::HttpStatus {
                    url: url.to_string(),
                    status,
                })
            }
            Err(e) => {
                return Err(StagingError::Transfer {
                    url: url.to_string(),
                    message: e.to_string(),
                })
            }
        };
        // Download next to the destination and rename, so an interrupted
        // transfer never leaves a partial file under the final name.
        let partial = dest.with_extension(format!("part-{}", std::process::id()));
        let result = (|| -> io::Result<()> {
            let mut out = fs::File::create(&partial)?;
            io::copy(&mut response.body_mut().as_reader(), &mut out)?;
            out.sync_all()?;
            fs::rename(&partial, dest)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&partial);
            return Err(StagingError::Transfer {
                url: url.to_string(),
                message: e.to_string(),
            });
        }
        Ok(())
    }

    /// Resolves a declared output to the path the task should write and
    /// creates its parent directory.
    pub fn prepare_output(&self, file: &FileRef) -> Result<FileRef, StagingError> {
        if file.scheme.is_remote() {
            return Err(StagingError::RemoteOutput(file.source.clone()));
        }
        let path = file.local_path(&self.run_dir);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(file.clone().with_staged_path(path))
    }

    /// Confirms a declared output exists after the task ran.
    pub fn stage_out(&self, file: &FileRef) -> Result<FileRef, TaskError> {
        let path = match &file.staged_path {
            Some(p) => p.clone(),
            None => file.local_path(&self.run_dir),
        };
        if path.is_file() {
            Ok(file.clone().with_staged_path(path))
        } else {
            Err(TaskError::new(
                ErrorKind::MissingOutput(file.clone()),
                format!("declared output {} was not produced", path.display()),
            ))
        }
    }
}
