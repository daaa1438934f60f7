use std::ffi::OsString;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus};

use crate::{CliError, ENV_CONFIG, ENV_MAP, ENV_OUT};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub target: PathBuf,
    pub config: PathBuf,
    /// Report prefix handed to the runtime.
    pub out: PathBuf,
    pub map: Option<PathBuf>,
    pub preload: Option<PathBuf>,
    pub args: Vec<OsString>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub status: ExitStatus,
    pub pid: u32,
    /// Report files the child wrote.
    pub reports: Vec<PathBuf>,
}

impl RunOutcome {
    /// The child's exit code, or 128 + signal when it was killed.
    pub fn exit_code(&self) -> i32 {
        self.status
            .code()
            .or_else(|| self.status.signal().map(|s| 128 + s))
            .unwrap_or(crate::EXIT_RUNTIME)
    }
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Environment for a monitored child. `LD_PRELOAD` keeps any entries the
/// parent already had.
pub(crate) fn child_command(
    program: &Path,
    config: Option<&Path>,
    out: &Path,
    map: Option<&Path>,
    preload: Option<&Path>,
) -> Command {
    let mut cmd = Command::new(program);
    if let Some(config) = config {
        cmd.env(ENV_CONFIG, absolute(config));
    }
    cmd.env(ENV_OUT, absolute(out));
    if let Some(map) = map {
        cmd.env(ENV_MAP, absolute(map));
    }
    if let Some(lib) = preload {
        let mut value = absolute(lib).into_os_string();
        if let Some(existing) = std::env::var_os("LD_PRELOAD").filter(|v| !v.is_empty()) {
            value.push(" ");
            value.push(existing);
        }
        cmd.env("LD_PRELOAD", value);
    }
    cmd
}

/// Report files written for `pid` under the prefix `out`.
pub fn reports_for(out: &Path, pid: u32) -> Vec<PathBuf> {
    let out = absolute(out);
    let (Some(dir), Some(name)) = (out.parent(), out.file_name()) else {
        return Vec::new();
    };
    let stem = format!("{}.pid{pid}", name.to_string_lossy());
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut found: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .filter(|e| {
            let n = e.file_name();
            let n = n.to_string_lossy();
            n == stem || n.starts_with(&format!("{stem}.rank"))
        })
        .map(|e| e.path())
        .collect();
    found.sort();
    found
}

/// Runs the target under monitoring and waits for it.
pub fn cmd_run(opts: &RunOptions) -> Result<RunOutcome, CliError> {
    if !opts.config.is_file() {
        return Err(CliError::MissingConfig(opts.config.clone()));
    }
    let mut child = child_command(
        &opts.target,
        Some(&opts.config),
        &opts.out,
        opts.map.as_deref(),
        opts.preload.as_deref(),
    )
    .args(&opts.args)
    .spawn()
    .map_err(|source| CliError::Launch {
        target: opts.target.clone(),
        source,
    })?;
    let pid = child.id();
    let status = child.wait().map_err(|source| CliError::Launch {
        target: opts.target.clone(),
        source,
    })?;
    Ok(RunOutcome {
        status,
        pid,
        reports: reports_for(&opts.out, pid),
    })
}
