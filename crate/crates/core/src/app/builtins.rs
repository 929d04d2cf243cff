//! Named native apps available in every process, including worker hosts.
//!
//! Worker processes cannot receive closures, so a native app runs there only
//! if a function of the same name is registered in the worker's registry.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::thread;
use std::time::Duration;

use super::{native_from_fn, AppError, AppOptions, AppSpec, Call, NativeFn};
use crate::task::ArgValue;

#[derive(Clone, Default)]
pub struct AppRegistry {
    apps: HashMap<String, NativeFn>,
}

impl AppRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding every builtin app.
    pub fn builtins() -> Self {
        let mut r = Self::empty();
        let entries: [(&str, NativeFn); 12] = [
            ("noop", std::sync::Arc::new(noop_fn)),
            ("identity", std::sync::Arc::new(identity_fn)),
            ("hello", std::sync::Arc::new(hello_fn)),
            ("hello_sleep", std::sync::Arc::new(hello_sleep_fn)),
            ("communicate", std::sync::Arc::new(communicate_fn)),
            ("sort_numbers", std::sync::Arc::new(sort_numbers_fn)),
            ("sleep_ms", std::sync::Arc::new(sleep_ms_fn)),
            ("combine", std::sync::Arc::new(combine_fn)),
            ("add", std::sync::Arc::new(add_fn)),
            ("fail_times", std::sync::Arc::new(fail_times_fn)),
            ("copy_file", std::sync::Arc::new(copy_file_fn)),
            ("pid", std::sync::Arc::new(pid_fn)),
        ];
        for (name, f) in entries {
            r.apps.insert(name.to_string(), f);
        }
        r
    }

    pub fn register(&mut self, name: impl Into<String>, f: NativeFn) {
        self.apps.insert(name.into(), f);
    }

    pub fn get(&self, name: &str) -> Option<&NativeFn> {
        self.apps.get(name)
    }

    /// App spec for a registered function.
    pub fn app(&self, name: &str) -> Option<AppSpec> {
        self.get(name)
            .map(|f| native_from_fn(name, f.clone(), AppOptions::default()))
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.apps.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

fn builtin(name: &str) -> AppSpec {
    AppRegistry::builtins().app(name).expect("builtin is registered")
}

pub fn noop() -> AppSpec {
    builtin("noop")
}
pub fn identity() -> AppSpec {
    builtin("identity")
}
pub fn hello() -> AppSpec {
    builtin("hello")
}
pub fn hello_sleep() -> AppSpec {
    builtin("hello_sleep")
}
pub fn communicate() -> AppSpec {
    builtin("communicate")
}
pub fn sort_numbers() -> AppSpec {
    builtin("sort_numbers")
}
pub fn sleep_ms() -> AppSpec {
    builtin("sleep_ms")
}
pub fn combine() -> AppSpec {
    builtin("combine")
}
pub fn add() -> AppSpec {
    builtin("add")
}
pub fn fail_times() -> AppSpec {
    builtin("fail_times")
}
pub fn copy_file() -> AppSpec {
    builtin("copy_file")
}
pub fn pid() -> AppSpec {
    builtin("pid")
}

fn noop_fn(_: &Call<'_>) -> Result<ArgValue, AppError> {
    Ok(ArgValue::Null)
}

fn identity_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    Ok(c.arg(0)?.clone())
}

fn hello_fn(_: &Call<'_>) -> Result<ArgValue, AppError> {
    Ok(ArgValue::from("Hello world"))
}

/// Sleeps (5 s unless a number of seconds is given) then greets.
fn hello_sleep_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let secs = c.args.first().and_then(ArgValue::as_real).unwrap_or(5.0);
    thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
    Ok(ArgValue::from("Hello World!"))
}

fn communicate_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    Ok(ArgValue::Text(format!("hello {}", c.text(0)?)))
}

/// Reads the lines of a file, trims them, and returns them sorted.
fn sort_numbers_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let path = c.file(0)?.filepath().map_err(|e| AppError(e.to_string()))?;
    let text = fs::read_to_string(path)?;
    let mut lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    lines.sort();
    Ok(ArgValue::List(lines.into_iter().map(ArgValue::Text).collect()))
}

fn sleep_ms_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let ms = c.int(0)?;
    thread::sleep(Duration::from_millis(ms.max(0) as u64));
    Ok(ArgValue::Null)
}

/// Deterministic mixing of a seed with integer inputs, for building DAGs of
/// pure tasks whose results depend on every upstream value and its order.
pub fn combine_values(seed: i64, inputs: &[i64]) -> i64 {
    let mut acc = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15u64 as i64) ^ 0x5bd1e995;
    for (i, v) in inputs.iter().enumerate() {
        acc = acc
            .rotate_left(13)
            .wrapping_mul(6364136223846793005)
            .wrapping_add(v.wrapping_mul(i as i64 + 1))
            ^ 0x2545F4914F6CDD1D;
    }
    acc
}

fn combine_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let seed = c.int(0)?;
    let inputs: Result<Vec<i64>, AppError> = (1..c.args.len()).map(|i| c.int(i)).collect();
    Ok(ArgValue::Int(combine_values(seed, &inputs?)))
}

fn add_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let mut sum = 0i64;
    for i in 0..c.args.len() {
        sum = sum.wrapping_add(c.int(i)?);
    }
    Ok(ArgValue::Int(sum))
}

/// `fail_times(counter_path, n, value)`: records each attempt as a line in
/// `counter_path` and fails while fewer than `n` attempts preceded this one.
/// The counter lives on disk so attempts in different processes agree.
fn fail_times_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let path = c.text(0)?;
    let n = c.int(1)?;
    let previous = fs::read_to_string(path).map(|s| s.lines().count()).unwrap_or(0) as i64;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "attempt {}", previous + 1)?;
    if previous < n {
        return Err(AppError(format!("deliberate failure {} of {n}", previous + 1)));
    }
    Ok(c.args.get(2).cloned().unwrap_or(ArgValue::Null))
}

/// Copies the file given as the first argument to the first declared output.
fn copy_file_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    let src = c.file(0)?.filepath().map_err(|e| AppError(e.to_string()))?;
    let dst = c
        .outputs
        .first()
        .ok_or_else(|| AppError::new("copy_file needs one declared output"))?
        .filepath()
        .map_err(|e| AppError(e.to_string()))?;
    let n = fs::copy(src, dst)?;
    Ok(ArgValue::Int(n as i64))
}

/// Identifies the executing process; optional sleep in ms first.
fn pid_fn(c: &Call<'_>) -> Result<ArgValue, AppError> {
    if let Some(ms) = c.args.first().and_then(ArgValue::as_int) {
        thread::sleep(Duration::from_millis(ms.max(0) as u64));
    }
    Ok(ArgValue::Int(std::process::id() as i64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::run_native;
    use std::collections::BTreeMap;

    fn call(name: &str, args: &[ArgValue]) -> Result<ArgValue, crate::TaskError> {
        let r = AppRegistry::builtins();
        let kwargs = BTreeMap::new();
        run_native(
            r.get(name).unwrap(),
            &Call {
                args,
                kwargs: &kwargs,
                outputs: &[],
            },
        )
    }

    #[test]
    fn listing_apps() {
        assert_eq!(call("hello", &[]), Ok("Hello world".into()));
        assert_eq!(call("communicate", &["bob".into()]), Ok("hello bob".into()));
        assert_eq!(call("identity", &[42.into()]), Ok(ArgValue::Int(42)));
        assert_eq!(call("hello_sleep", &[0.0.into()]), Ok("Hello World!".into()));
    }

    #[test]
    fn fail_times_counts_attempts() {
        let dir = tempfile::tempdir().unwrap();
        let counter = dir.path().join("c").to_string_lossy().into_owned();
        let args = [ArgValue::from(counter.as_str()), 2.into(), "ok".into()];
        assert!(call("fail_times", &args).is_err());
        assert!(call("fail_times", &args).is_err());
        assert_eq!(call("fail_times", &args), Ok("ok".into()));
        assert_eq!(fs::read_to_string(&counter).unwrap().lines().count(), 3);
    }

    #[test]
    fn combine_depends_on_order() {
        assert_ne!(combine_values(1, &[2, 3]), combine_values(1, &[3, 2]));
        assert_eq!(
            call("combine", &[1.into(), 2.into(), 3.into()]),
            Ok(ArgValue::Int(combine_values(1, &[2, 3])))
        );
        assert!(call("combine", &["x".into()]).is_err());
    }

    #[test]
    fn registry_lookup() {
        let r = AppRegistry::builtins();
        assert!(r.app("noop").is_some());
        assert!(r.app("not-an-app").is_none());
        assert!(r.names().contains(&"sort_numbers"));
    }
}
