use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::run::child_command;
use crate::{CliError, ENV_CONFIG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Built without instrumentation.
    Vanilla,
    /// Every function instrumented.
    All,
    /// Only the monitored functions instrumented.
    Selective,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vanilla, Mode::Selective, Mode::All];

    pub fn suffix(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::All => "all",
            Mode::Selective => "selective",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Variants live at `<prefix>.<mode>`.
    pub prefix: PathBuf,
    pub modes: Vec<Mode>,
    pub reps: usize,
    pub config: Option<PathBuf>,
    pub preload: Option<PathBuf>,
    pub args: Vec<OsString>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: Mode,
    pub times: Vec<Duration>,
}

impl BenchRow {
    pub fn median(&self) -> Duration {
        let mut t = self.times.clone();
        t.sort();
        match t.len() {
            0 => Duration::ZERO,
            n if n % 2 == 1 => t[n / 2],
            n => (t[n / 2 - 1] + t[n / 2]) / 2,
        }
    }

    pub fn min(&self) -> Duration {
        self.times.iter().copied().min().unwrap_or_default()
    }

    pub fn max(&self) -> Duration {
        self.times.iter().copied().max().unwrap_or_default()
    }

    /// `max - min`; undefined for a single run.
    pub fn spread(&self) -> Option<Duration> {
        (self.times.len() > 1).then(|| self.max() - self.min())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn row(&self, mode: Mode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    /// Median time over vanilla per monitored call.
    pub fn overhead_per_call(&self, mode: Mode, calls: u64) -> Option<f64> {
        let base = self.row(Mode::Vanilla)?.median().as_secs_f64();
        let t = self.row(mode)?.median().as_secs_f64();
        (calls > 0).then(|| (t - base) / calls as f64)
    }

    pub fn render(&self, calls: Option<u64>) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<10} {:>5} {:>12} {:>12} {:>12} {:>12}",
            "mode", "reps", "median s", "min s", "max s", "spread s"
        );
        if calls.is_some() {
            let _ = write!(out, " {:>14}", "ns/call");
        }
        out.push('\n');
        for r in &self.rows {
            let spread = r
                .spread()
                .map_or_else(|| "n/a".to_string(), |s| format!("{:.6}", s.as_secs_f64()));
            let _ = write!(
                out,
                "{:<10} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12}",
                r.mode.suffix(),
                r.times.len(),
                r.median().as_secs_f64(),
                r.min().as_secs_f64(),
                r.max().as_secs_f64(),
                spread
            );
            if let Some(calls) = calls {
                let per_call = self
                    .overhead_per_call(r.mode, calls)
                    .map_or_else(|| "n/a".to_string(), |s| format!("{:.2}", s * 1e9));
                let _ = write!(out, " {per_call:>14}");
            }
            out.push('\n');
        }
        out
    }
}

/// Times each variant `reps` times, interleaving modes within a repetition
/// so drift affects them alike. Runs are sequential.
pub fn cmd_bench(opts: &BenchOptions) -> Result<BenchTable, CliError> {
    let binaries: Vec<(Mode, PathBuf)> = opts
        .modes
        .iter()
        .map(|&m| {
            let mut name = opts.prefix.clone().into_os_string();
            name.push(".");
            name.push(m.suffix());
            (m, PathBuf::from(name))
        })
        .collect();
    if let Some((_, missing)) = binaries.iter().find(|(_, p)| !p.is_file()) {
        return Err(CliError::BuildMissing(missing.clone()));
    }
    let scratch = tempfile::tempdir().map_err(|e| CliError::io(&std::env::temp_dir(), e))?;
    let out = scratch.path().join("bench.csv");
    let mut rows: Vec<BenchRow> = opts
        .modes
        .iter()
        .map(|&mode| BenchRow {
            mode,
            times: Vec::with_capacity(opts.reps),
        })
        .collect();
    for _ in 0..opts.reps {
        for (row, (mode, binary)) in rows.iter_mut().zip(&binaries) {
            // Vanilla runs with no runtime attached at all.
            let mut cmd = if *mode == Mode::Vanilla {
                let mut cmd = Command::new(binary);
                cmd.env_remove(ENV_CONFIG);
                cmd
            } else {
                child_command(binary, opts.config.as_deref(), &out, None, opts.preload.as_deref())
            };
            cmd.args(&opts.args).stdout(Stdio::null());
            let start = Instant::now();
            let status = cmd.status().map_err(|source| CliError::Launch {
                target: binary.clone(),
                source,
            })?;
            let elapsed = start.elapsed();
            if !status.success() {
                return Err(CliError::Launch {
                    target: binary.clone(),
                    source: std::io::Error::other(format!("exited with {status}")),
                });
            }
            row.times.push(elapsed);
        }
    }
    Ok(BenchTable { rows })
}
