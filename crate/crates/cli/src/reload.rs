use std::ffi::OsStr;
use std::io::Write;
use std::os::unix::ffi::OsStrExt;
use std::path::{Path, PathBuf};

use scalpel_core::config::parse_config;

use crate::{CliError, ENV_CONFIG};

fn signal(pid: i32, sig: libc::c_int) -> Result<(), CliError> {
    if pid <= 0 {
        return Err(CliError::Signal {
            pid,
            source: std::io::Error::from_raw_os_error(libc::ESRCH),
        });
    }
    // SAFETY: kill has no memory-safety preconditions.
    if unsafe { libc::kill(pid, sig) } != 0 {
        return Err(CliError::Signal {
            pid,
            source: std::io::Error::last_os_error(),
        });
    }
    Ok(())
}

/// The configuration path a running process was started with.
pub fn target_config_path(pid: i32) -> Result<PathBuf, CliError> {
    let proc = PathBuf::from(format!("/proc/{pid}"));
    let environ = proc.join("environ");
    // Reads back empty while the process is still inside exec.
    let mut raw = Vec::new();
    for _ in 0..50 {
        raw = std::fs::read(&environ).map_err(|e| CliError::io(&environ, e))?;
        if !raw.is_empty() {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(2));
    }
    let prefix = format!("{ENV_CONFIG}=");
    let value = raw
        .split(|&b| b == 0)
        .find_map(|var| var.strip_prefix(prefix.as_bytes()))
        .filter(|v| !v.is_empty())
        .ok_or(CliError::NotMonitored(pid))?;
    let path = Path::new(OsStr::from_bytes(value));
    Ok(if path.is_absolute() {
        path.to_path_buf()
    } else {
        proc.join("cwd").join(path)
    })
}

/// Replaces the target's configuration file with `config` (write to a
/// temporary file, then rename) and sends it `SIGUSR1`.
pub fn cmd_reload(pid: i32, config: &Path) -> Result<(), CliError> {
    signal(pid, 0)?;
    let text = std::fs::read_to_string(config).map_err(|e| CliError::io(config, e))?;
    parse_config(&text).map_err(|source| CliError::InvalidConfig {
        path: config.to_path_buf(),
        source,
    })?;
    let dest = target_config_path(pid)?;
    let dir = dest.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(text.as_bytes())
        .and_then(|()| tmp.as_file().sync_all())
        .map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(&dest).map_err(|e| CliError::io(&dest, e.error))?;
    signal(pid, libc::SIGUSR1)
}
