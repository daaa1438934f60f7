//! Instrumentation runtime for programs built with `-finstrument-functions`.
//!
//! Link it into the program or load it with `LD_PRELOAD`. It exports
//! `__cyg_profile_func_enter` and `__cyg_profile_func_exit` and is configured
//! through the environment:
//!
//! | variable | meaning |
//! |---|---|
//! | `SCALPEL_CONFIG` | context configuration file; unset disables the runtime |
//! | `SCALPEL_OUT` | report file prefix; reports go to `<prefix>.pid<PID>[.rank<R>]`, or stdout when unset |
//! | `SCALPEL_MAP` | symbol map (text or ELF) used instead of `/proc/self/exe` |
//! | `SCALPEL_NO_RETAIN` | `1` closes the session after every monitored call |
//! | `SCALPEL_LOG` | diagnostic level on stderr (`error` .. `trace`, default `warn`) |
//!
//! `SIGUSR1` re-reads `SCALPEL_CONFIG` at the next point where no counter
//! session is open. The final report is written at process exit.

use std::cell::Cell;
use std::ffi::c_void;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

use scalpel_core::backend::PerfBackend;
use scalpel_core::config::parse_config;
use scalpel_core::registry::{install, RegistryEpoch};
use scalpel_core::report::{rank_from_env, ReportDestination};
use scalpel_core::runtime::{CallbackRuntime, RuntimeOptions};
use scalpel_core::symbols::{executable_load_bias, SymbolMap};
use scalpel_core::CounterBackend;

pub const ENV_CONFIG: &str = "SCALPEL_CONFIG";
pub const ENV_OUT: &str = "SCALPEL_OUT";
pub const ENV_MAP: &str = "SCALPEL_MAP";
pub const ENV_NO_RETAIN: &str = "SCALPEL_NO_RETAIN";
pub const ENV_LOG: &str = "SCALPEL_LOG";

pub type Runtime = CallbackRuntime<PerfBackend>;

static RUNTIME: OnceLock<Option<Runtime>> = OnceLock::new();
/// A reload signal that arrived before the runtime existed.
static EARLY_RELOAD: AtomicBool = AtomicBool::new(false);

thread_local! {
    static IN_CALLBACK: Cell<bool> = const { Cell::new(false) };
}

/// The process-wide runtime, initialising it on first use. `None` when
/// `SCALPEL_CONFIG` is unset.
pub fn runtime() -> Option<&'static Runtime> {
    RUNTIME.get_or_init(init).as_ref()
}

fn init() -> Option<Runtime> {
    StderrLogger::install();
    let config_path = PathBuf::from(std::env::var_os(ENV_CONFIG)?);
    let symbols = load_symbols();
    let backend = PerfBackend::default();
    let epoch = match load_epoch(&config_path, &symbols, &backend) {
        Ok(epoch) => epoch,
        Err(msg) => {
            log::error!("{msg}; monitoring nothing until a reload succeeds");
            RegistryEpoch::empty(0)
        }
    };
    let options = RuntimeOptions {
        retain_adjacent: std::env::var(ENV_NO_RETAIN).map_or(true, |v| v.trim() != "1"),
        config_path: Some(config_path),
    };
    let out = std::env::var_os(ENV_OUT).map(PathBuf::from);
    let rt = CallbackRuntime::new(backend, symbols, epoch, options).with_sink(move |report| {
        // Resolved per emission so forked children get their own file.
        let dest = match &out {
            Some(base) => ReportDestination::per_process(base, std::process::id(), rank_from_env().as_deref()),
            None => ReportDestination::Stdout,
        };
        if let Err(e) = dest.emit(report) {
            log::error!("cannot write report: {e}");
        }
    });
    if EARLY_RELOAD.swap(false, Ordering::AcqRel) {
        rt.registry().signal_reload();
    }
    // SAFETY: registering a plain extern "C" function with no captured state.
    if unsafe { libc::atexit(at_exit) } != 0 {
        log::warn!("atexit registration failed; no final report");
    }
    Some(rt)
}

fn load_symbols() -> SymbolMap {
    let path = std::env::var_os(ENV_MAP)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/proc/self/exe"));
    match SymbolMap::load(&path) {
        Ok(map) => map.relocated(executable_load_bias()),
        Err(e) => {
            log::error!("cannot read symbols from {}: {e}", path.display());
            SymbolMap::default()
        }
    }
}

fn load_epoch(path: &Path, symbols: &SymbolMap, backend: &PerfBackend) -> Result<RegistryEpoch, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let config = parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let (epoch, warnings) =
        install(&config, symbols, backend.descriptor(), 0).map_err(|e| format!("{}: {e}", path.display()))?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(epoch)
}

extern "C" fn at_exit() {
    if let Some(Some(rt)) = RUNTIME.get() {
        guarded(|| {
            rt.on_process_exit();
        });
    }
}

extern "C" fn on_sigusr1(_: libc::c_int) {
    match RUNTIME.get() {
        Some(Some(rt)) => rt.registry().signal_reload(),
        Some(None) => {}
        None => EARLY_RELOAD.store(true, Ordering::Release),
    }
}

fn install_signal_handler() {
    // SAFETY: the handler only performs atomic stores; sigaction is given a
    // zeroed, then filled, struct that outlives the call.
    unsafe {
        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = on_sigusr1 as extern "C" fn(libc::c_int) as libc::sighandler_t;
        action.sa_flags = libc::SA_RESTART;
        libc::sigemptyset(&mut action.sa_mask);
        libc::sigaction(libc::SIGUSR1, &action, std::ptr::null_mut());
    }
}

extern "C" fn constructor() {
    if std::env::var_os(ENV_CONFIG).is_none() {
        return;
    }
    // The runtime itself starts at the first callback, so a process that
    // never makes one writes no report.
    install_signal_handler();
}

#[used]
#[link_section = ".init_array"]
static CONSTRUCTOR: extern "C" fn() = constructor;

/// Runs `f` unless this thread is already inside a callback.
#[inline]
fn guarded(f: impl FnOnce()) {
    let entered = IN_CALLBACK
        .try_with(|flag| !flag.replace(true))
        .unwrap_or(false);
    if entered {
        f();
        let _ = IN_CALLBACK.try_with(|flag| flag.set(false));
    }
}

/// # Safety
///
/// Called by compiler-generated code with the entered function's address.
#[no_mangle]
pub unsafe extern "C" fn __cyg_profile_func_enter(this_fn: *mut c_void, call_site: *mut c_void) {
    if let Some(rt) = runtime() {
        guarded(|| rt.on_function_entry(this_fn as u64, call_site as u64));
    }
}

/// # Safety
///
/// Called by compiler-generated code with the exited function's address.
#[no_mangle]
pub unsafe extern "C" fn __cyg_profile_func_exit(this_fn: *mut c_void, call_site: *mut c_void) {
    if let Some(rt) = runtime() {
        guarded(|| rt.on_function_exit(this_fn as u64, call_site as u64));
    }
}

struct StderrLogger {
    level: log::LevelFilter,
}

impl StderrLogger {
    fn install() {
        static LOGGER: OnceLock<StderrLogger> = OnceLock::new();
        let level = std::env::var(ENV_LOG)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(log::LevelFilter::Warn);
        let logger = LOGGER.get_or_init(|| StderrLogger { level });
        // Fails if the host already installed a logger; theirs wins.
        if log::set_logger(logger).is_ok() {
            log::set_max_level(level);
        }
    }
}

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            let _ = writeln!(
                std::io::stderr().lock(),
                "scalpel[{}]: {}: {}",
                std::process::id(),
                record.level(),
                record.args()
            );
        }
    }

    fn flush(&self) {}
}
