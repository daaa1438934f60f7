//! Monitored-function registry.
//!
//! Contexts live in an immutable [`RegistryEpoch`] keyed by entry address.
//! Reloads build a new epoch off to the side and publish it with one atomic
//! pointer swap; the previous epoch's counts are flushed as a partial report.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use arc_swap::{ArcSwap, Guard};
use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::backend::{validate_events, BackendDescriptor, CounterSample, EventGroup, ValidationError};
use crate::config::{parse_config, FunctionContextSpec, ParseError};
use crate::multiplex::multiplex_group_index;
use crate::report::{rank_from_env, FunctionReport, GroupReport, ProfileReport};
use crate::symbols::{LookupError, SymbolMap};

/// Runtime state of one monitored function.
#[derive(Debug)]
pub struct FunctionContext {
    pub spec: FunctionContextSpec,
    pub address: u64,
    pub groups: Vec<EventGroup>,
    call_count: AtomicU64,
    calls_per_group: Vec<AtomicU64>,
    accumulated: Mutex<Vec<Vec<u64>>>,
    sessions: AtomicU64,
    disabled: AtomicBool,
}

impl FunctionContext {
    pub fn new(spec: FunctionContextSpec, address: u64, groups: Vec<EventGroup>) -> Self {
        Self {
            calls_per_group: groups.iter().map(|_| AtomicU64::new(0)).collect(),
            accumulated: Mutex::new(groups.iter().map(|g| vec![0; g.len()]).collect()),
            groups,
            spec,
            address,
            call_count: AtomicU64::new(0),
            sessions: AtomicU64::new(0),
            disabled: AtomicBool::new(false),
        }
    }

    pub fn call_count(&self) -> u64 {
        self.call_count.load(Ordering::Relaxed)
    }

    /// Counts one entry and returns its 1-based call number.
    #[inline]
    pub fn record_call(&self) -> u64 {
        self.call_count.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn calls_in_group(&self, group: usize) -> u64 {
        self.calls_per_group
            .get(group)
            .map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn attribute_call(&self, group: usize) {
        if let Some(c) = self.calls_per_group.get(group) {
            c.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Group that measures call number `call_number`.
    #[inline]
    pub fn group_for_call(&self, call_number: u64) -> usize {
        multiplex_group_index(call_number, self.spec.multiplex_period, self.groups.len())
    }

    /// Whether entries can open a counter session.
    pub fn is_measurable(&self) -> bool {
        !self.groups.is_empty() && !self.disabled.load(Ordering::Relaxed)
    }

    pub fn disable(&self) {
        self.disabled.store(true, Ordering::Relaxed);
    }

    pub fn is_disabled(&self) -> bool {
        self.disabled.load(Ordering::Relaxed)
    }

    pub fn note_session(&self) {
        self.sessions.fetch_add(1, Ordering::Relaxed);
    }

    /// Counter sessions opened so far.
    pub fn session_count(&self) -> u64 {
        self.sessions.load(Ordering::Relaxed)
    }

    /// Adds a closed session's final totals.
    pub fn accumulate(&self, samples: &[CounterSample]) {
        let mut acc = self.accumulated.lock().unwrap_or_else(|e| e.into_inner());
        for s in samples {
            if let Some(slot) = acc.get_mut(s.group_index) {
                for (a, v) in slot.iter_mut().zip(&s.values) {
                    *a = a.saturating_add(*v);
                }
            }
        }
    }

    pub fn accumulated(&self) -> Vec<Vec<u64>> {
        self.accumulated.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn report(&self) -> FunctionReport {
        let acc = self.accumulated();
        FunctionReport {
            function_name: self.spec.function_name.clone(),
            call_count: self.call_count(),
            groups: self
                .groups
                .iter()
                .zip(acc)
                .enumerate()
                .map(|(gi, (g, values))| GroupReport {
                    events: g.unit_names(),
                    values,
                    calls: self.calls_in_group(gi),
                })
                .collect(),
        }
    }
}

/// One installed configuration.
#[derive(Debug)]
pub struct RegistryEpoch {
    pub epoch_id: u64,
    pub binary_name: String,
    pub installed_at: SystemTime,
    contexts: FxHashMap<u64, FunctionContext>,
}

impl RegistryEpoch {
    /// An epoch that monitors nothing.
    pub fn empty(epoch_id: u64) -> Self {
        Self {
            epoch_id,
            binary_name: String::new(),
            installed_at: SystemTime::now(),
            contexts: FxHashMap::default(),
        }
    }

    #[inline]
    pub fn lookup(&self, address: u64) -> Option<&FunctionContext> {
        if self.contexts.is_empty() {
            return None;
        }
        self.contexts.get(&address)
    }

    pub fn by_name(&self, name: &str) -> Option<&FunctionContext> {
        self.contexts.values().find(|c| c.spec.function_name == name)
    }

    pub fn contexts(&self) -> impl Iterator<Item = &FunctionContext> {
        self.contexts.values()
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Snapshot of this epoch's accumulated counts.
    pub fn report(&self) -> ProfileReport {
        let mut report = ProfileReport {
            binary_name: self.binary_name.clone(),
            epoch_id: self.epoch_id,
            process_id: std::process::id(),
            rank_tag: rank_from_env(),
            entries: self.contexts.values().map(FunctionContext::report).collect(),
        };
        report.sort_entries();
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstallWarning {
    #[error("function {0:?} not found in the symbol table; skipped")]
    UnknownFunction(String),
    #[error("function {name:?} resolves to several addresses; skipped")]
    AmbiguousFunction { name: String, addresses: Vec<u64> },
    #[error("function {name:?} shares address {address:#x} with {other:?}; skipped")]
    SharedAddress {
        name: String,
        other: String,
        address: u64,
    },
}

/// Builds an epoch from a parsed configuration. Unresolvable functions are
/// skipped with a warning; invalid event lists fail the whole install.
pub fn install(
    config: &crate::config::ContextConfig,
    symbols: &SymbolMap,
    backend: &BackendDescriptor,
    epoch_id: u64,
) -> Result<(RegistryEpoch, Vec<InstallWarning>), ValidationError> {
    let mut contexts = FxHashMap::default();
    let mut warnings = Vec::new();
    for spec in &config.functions {
        let groups = validate_events(backend, spec)?;
        let address = match symbols.lookup_by_name(&spec.function_name) {
            Ok(a) => a,
            Err(LookupError::NotFound(name)) => {
                warnings.push(InstallWarning::UnknownFunction(name));
                continue;
            }
            Err(LookupError::AmbiguousName { name, addresses }) => {
                warnings.push(InstallWarning::AmbiguousFunction { name, addresses });
                continue;
            }
        };
        if let Some(existing) = contexts.get(&address) {
            let existing: &FunctionContext = existing;
            warnings.push(InstallWarning::SharedAddress {
                name: spec.function_name.clone(),
                other: existing.spec.function_name.clone(),
                address,
            });
            continue;
        }
        contexts.insert(address, FunctionContext::new(spec.clone(), address, groups));
    }
    Ok((
        RegistryEpoch {
            epoch_id,
            binary_name: config.binary_name.clone(),
            installed_at: SystemTime::now(),
            contexts,
        },
        warnings,
    ))
}

#[derive(Debug, Error)]
pub enum ReloadError {
    #[error("no configuration path to reload from")]
    NoSource,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug)]
pub enum ReloadOutcome {
    /// Nothing was pending.
    None,
    /// The new epoch is live; `flushed` holds the retired epoch's counts.
    Applied {
        epoch_id: u64,
        flushed: ProfileReport,
        warnings: Vec<InstallWarning>,
    },
    /// The previous epoch stays in force.
    Failed(ReloadError),
}

/// Holder of the live epoch and of pending reload requests.
#[derive(Debug)]
pub struct ContextRegistry {
    current: ArcSwap<RegistryEpoch>,
    pending: AtomicBool,
    pending_path: Mutex<Option<PathBuf>>,
}

impl ContextRegistry {
    pub fn new(epoch: RegistryEpoch) -> Self {
        Self {
            current: ArcSwap::from_pointee(epoch),
            pending: AtomicBool::new(false),
            pending_path: Mutex::new(None),
        }
    }

    /// Cheap read guard on the live epoch.
    #[inline]
    pub fn load(&self) -> Guard<Arc<RegistryEpoch>> {
        self.current.load()
    }

    pub fn load_full(&self) -> Arc<RegistryEpoch> {
        self.current.load_full()
    }

    /// Asks for a reload from `path` at the next quiescent point.
    pub fn request_reload(&self, path: impl Into<PathBuf>) {
        *self.pending_path.lock().unwrap_or_else(|e| e.into_inner()) = Some(path.into());
        self.pending.store(true, Ordering::Release);
    }

    /// Asks for a reload from the default source. Only touches an atomic, so
    /// it may be called from a signal handler.
    pub fn signal_reload(&self) {
        self.pending.store(true, Ordering::Release);
    }

    #[inline]
    pub fn is_reload_pending(&self) -> bool {
        self.pending.load(Ordering::Relaxed)
    }

    /// Replaces the live epoch with one built from the pending source, or
    /// `default_path` if the request named none. The caller must guarantee no
    /// counter session is open.
    pub fn apply_pending_reload(
        &self,
        symbols: &SymbolMap,
        backend: &BackendDescriptor,
        default_path: Option<&Path>,
    ) -> ReloadOutcome {
        if !self.pending.swap(false, Ordering::Acquire) {
            return ReloadOutcome::None;
        }
        let requested = self
            .pending_path
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .take();
        let Some(path) = requested.or_else(|| default_path.map(Path::to_path_buf)) else {
            return ReloadOutcome::Failed(ReloadError::NoSource);
        };
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(source) => return ReloadOutcome::Failed(ReloadError::Io { path, source }),
        };
        let config = match parse_config(&text) {
            Ok(c) => c,
            Err(source) => return ReloadOutcome::Failed(ReloadError::Parse { path, source }),
        };
        let old = self.current.load_full();
        let epoch_id = old.epoch_id + 1;
        let (epoch, warnings) = match install(&config, symbols, backend, epoch_id) {
            Ok(v) => v,
            Err(e) => return ReloadOutcome::Failed(e.into()),
        };
        self.current.store(Arc::new(epoch));
        ReloadOutcome::Applied {
            epoch_id,
            flushed: old.report(),
            warnings,
        }
    }
}
