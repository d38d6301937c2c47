//! Out-of-process helpers (renderers, embedding backends) run from a command
//! template, with a timeout and a cap on concurrent children.

use std::fs::File;
use std::io::Read;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;
use wait_timeout::ChildExt;

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("bad command template: {0}")]
    BadTemplate(String),
    #[error("could not start command: {0}")]
    Spawn(std::io::Error),
    #[error("command timed out after {0:?}")]
    Timeout(Duration),
    #[error("command exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Counting semaphore bounding concurrently running child processes.
#[derive(Debug, Clone)]
pub struct ProcessLimiter {
    inner: Arc<(Mutex<usize>, Condvar)>,
    cap: usize,
}

pub struct ProcessPermit {
    inner: Arc<(Mutex<usize>, Condvar)>,
}

impl ProcessLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            inner: Arc::new((Mutex::new(0), Condvar::new())),
            cap: cap.max(1),
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn in_use(&self) -> usize {
        *self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn acquire(&self) -> ProcessPermit {
        let (lock, cvar) = &*self.inner;
        let mut used = lock.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = cvar.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        ProcessPermit {
            inner: self.inner.clone(),
        }
    }
}

impl Default for ProcessLimiter {
    fn default() -> Self {
        Self::new(4)
    }
}

impl Drop for ProcessPermit {
    fn drop(&mut self) {
        let (lock, cvar) = &*self.inner;
        let mut used = lock.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        cvar.notify_one();
    }
}

/// Splits a template into argv (shell-style quoting) and substitutes every
/// `{name}` placeholder inside each argument.
pub fn expand_template(template: &str, vars: &[(&str, &str)]) -> Result<Vec<String>, ProcessError> {
    let words = shlex::split(template)
        .ok_or_else(|| ProcessError::BadTemplate(format!("unbalanced quotes in {template:?}")))?;
    if words.is_empty() {
        return Err(ProcessError::BadTemplate("empty command".into()));
    }
    Ok(words
        .into_iter()
        .map(|w| {
            vars.iter()
                .fold(w, |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
        })
        .collect())
}

/// Checks that every placeholder occurs in the template.
pub fn check_placeholders(template: &str, required: &[&str]) -> Result<(), String> {
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|p| !template.contains(&format!("{{{p}}}")))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(format!("command template is missing placeholders: {}", missing.join(", ")))
    }
}

/// Runs `argv` with stdout/stderr captured to files in `workdir`. Succeeds only
/// on exit status 0 within `timeout`.
pub fn run(
    argv: &[String],
    workdir: &Path,
    timeout: Duration,
    limiter: &ProcessLimiter,
) -> Result<(), ProcessError> {
    let _permit = limiter.acquire();
    let stdout = File::create(workdir.join("stdout.log"))?;
    let stderr_path = workdir.join("stderr.log");
    let stderr = File::create(&stderr_path)?;
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(ProcessError::Spawn)?;
    let status: ExitStatus = match child.wait_timeout(timeout)? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ProcessError::Timeout(timeout));
        }
    };
    if status.success() {
        return Ok(());
    }
    let mut err = String::new();
    if let Ok(mut f) = File::open(&stderr_path) {
        let mut buf = Vec::new();
        let _ = f.by_ref().take(16 * 1024).read_to_end(&mut buf);
        err = String::from_utf8_lossy(&buf).trim().to_string();
    }
    Err(ProcessError::Failed {
        status: status.to_string(),
        stderr: err,
    })
}
