//! `scalpel` command-line front-end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use scalpel_core::config::ParseError;
use scalpel_core::report::{
    average_multiplexed, compare_reports, parse_report_csv, render_ratio_table, render_table, Aggregation,
    CompareError, EventTotals, ProfileReport, RatioTable, SchemaError,
};

pub mod bench;
pub mod reload;
pub mod run;

pub use bench::{cmd_bench, BenchOptions, BenchTable, Mode};
pub use reload::cmd_reload;
pub use run::{cmd_run, RunOptions, RunOutcome};

pub const ENV_CONFIG: &str = "SCALPEL_CONFIG";
pub const ENV_OUT: &str = "SCALPEL_OUT";
pub const ENV_MAP: &str = "SCALPEL_MAP";
pub const RUNTIME_LIBRARY: &str = "libscalpel_rt.so";

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot launch {target}: {source}")]
    Launch {
        target: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration file {0} does not exist")]
    MissingConfig(PathBuf),
    #[error("{path}: {source}")]
    InvalidConfig {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("cannot signal process {pid}: {source}")]
    Signal {
        pid: i32,
        #[source]
        source: std::io::Error,
    },
    #[error("process {0} has no {ENV_CONFIG} in its environment")]
    NotMonitored(i32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Schema {
        path: PathBuf,
        #[source]
        source: SchemaError,
    },
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error("variant binary {0} is missing; build the fixture variants first")]
    BuildMissing(PathBuf),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scalpel", version, about = "Function-level hardware counter profiling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an instrumented program with a context configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report file prefix; the runtime appends `.pid<PID>`.
        #[arg(long, default_value = "scalpel-report.csv")]
        out: PathBuf,
        /// Symbol map to use instead of the program's own symbol table.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Runtime library to preload. Defaults to the one next to this
        /// executable, if present.
        #[arg(long)]
        preload: Option<PathBuf>,
        target: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<OsString>,
    },
    /// Replace a running program's configuration and signal it to reload.
    Reload {
        pid: i32,
        #[arg(long)]
        config: PathBuf,
    },
    /// Ratios of candidate reports to a baseline, per event.
    Compare {
        baseline: PathBuf,
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        /// Compare extrapolated whole-run estimates instead of raw totals.
        #[arg(long)]
        estimate: bool,
    },
    /// Time the vanilla, all and selective builds of a program.
    Bench {
        /// Path prefix of the variants: `<prefix>.vanilla`, `<prefix>.all`,
        /// `<prefix>.selective`.
        prefix: PathBuf,
        #[arg(long = "mode", value_enum)]
        modes: Vec<ModeArg>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preload: Option<PathBuf>,
        /// Calls of the monitored function per run, for per-call overhead.
        #[arg(long)]
        calls: Option<u64>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<OsString>,
    },
    /// Pretty-print a report file.
    Report { file: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    All,
    Selective,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::All => Mode::All,
            ModeArg::Selective => Mode::Selective,
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("scalpel: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Run {
            config,
            out,
            map,
            preload,
            target,
            args,
        } => {
            let outcome = cmd_run(&RunOptions {
                target,
                config,
                out,
                map,
                preload: preload.or_else(default_runtime_library),
                args,
            })?;
            if outcome.reports.is_empty() {
                eprintln!(
                    "scalpel: warning: no report produced; is the target instrumented and the runtime loaded?"
                );
            }
            for r in &outcome.reports {
                eprintln!("scalpel: report written to {}", r.display());
            }
            Ok(outcome.exit_code())
        }
        Command::Reload { pid, config } => {
            cmd_reload(pid, &config)?;
            Ok(0)
        }
        Command::Compare {
            baseline,
            candidates,
            estimate,
        } => {
            let how = if estimate {
                Aggregation::Estimated
            } else {
                Aggregation::Raw
            };
            let table = cmd_compare(&baseline, &candidates, how)?;
            print!("{}", render_ratio_table(&table));
            Ok(0)
        }
        Command::Bench {
            prefix,
            modes,
            reps,
            config,
            preload,
            calls,
            args,
        } => {
            let modes = if modes.is_empty() {
                Mode::ALL.to_vec()
            } else {
                modes.into_iter().map(Mode::from).collect()
            };
            let table = cmd_bench(&BenchOptions {
                prefix,
                modes,
                reps: reps.max(1),
                config,
                preload: preload.or_else(default_runtime_library),
                args,
            })?;
            print!("{}", table.render(calls));
            Ok(0)
        }
        Command::Report { file } => {
            print!("{}", cmd_report(&file)?);
            Ok(0)
        }
    }
}

/// The runtime library shipped next to the running executable.
pub fn default_runtime_library() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let candidate = exe.parent()?.join(RUNTIME_LIBRARY);
    candidate.is_file().then_some(candidate)
}

pub fn read_reports(path: &Path) -> Result<Vec<ProfileReport>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_report_csv(&text).map_err(|source| CliError::Schema {
        path: path.to_path_buf(),
        source,
    })
}

fn label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn cmd_compare(baseline: &Path, candidates: &[PathBuf], how: Aggregation) -> Result<RatioTable, CliError> {
    let base = EventTotals::from_reports(label(baseline), &read_reports(baseline)?, how);
    let cands = candidates
        .iter()
        .map(|c| Ok(EventTotals::from_reports(label(c), &read_reports(c)?, how)))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(compare_reports(&base, &cands)?)
}

/// Tables for every report in `path`, with extrapolated estimates for
/// functions measured over several groups.
pub fn cmd_report(path: &Path) -> Result<String, CliError> {
    let mut out = String::new();
    for report in read_reports(path)? {
        out.push_str(&render_table(&report));
        for entry in report.entries.iter().filter(|e| e.groups.len() > 1) {
            let avg = average_multiplexed(entry);
            out.push_str(&format!("# estimates for {} ({} calls)\n", entry.function_name, entry.call_count));
            for est in &avg.estimates {
                out.push_str(&format!(
                    "#   {:<24} group {:>2}  per call {:>14.3}  estimate {:>16.0}\n",
                    est.event, est.group, est.per_call, est.estimate
                ));
            }
            for g in &avg.omitted_groups {
                out.push_str(&format!("#   group {g} saw no calls; omitted\n"));
            }
        }
    }
    Ok(out)
}
