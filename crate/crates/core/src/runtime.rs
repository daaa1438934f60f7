//! Entry/exit state machine.
//!
//! At most one counter session is open per process. The thread that opened it
//! owns it; any monitored function entered while it is open, on any thread,
//! is only counted. When the session's function returns, the session is kept
//! for one more callback: an immediate re-entry of the same function reuses
//! it, anything else closes it first.

use std::cell::Cell;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::backend::{BackendError, CounterBackend, ValidationError};
use crate::config::ContextConfig;
use crate::registry::{install, ContextRegistry, InstallWarning, RegistryEpoch, ReloadOutcome};
use crate::report::ProfileReport;
use crate::symbols::SymbolMap;

/// Identifies a thread to the state machine. Never zero.
pub type ThreadToken = u64;

/// Handed out once thread-local storage is gone; such threads only count.
pub const DETACHED_THREAD: ThreadToken = u64::MAX;

const NO_OWNER: u64 = 0;

/// Token of the calling thread.
pub fn current_thread_token() -> ThreadToken {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    thread_local! {
        static TOKEN: Cell<u64> = const { Cell::new(0) };
    }
    TOKEN
        .try_with(|t| match t.get() {
            0 => {
                let v = NEXT.fetch_add(1, Ordering::Relaxed);
                t.set(v);
                v
            }
            v => v,
        })
        .unwrap_or(DETACHED_THREAD)
}

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    /// Keep a session open across back-to-back calls of its function.
    pub retain_adjacent: bool,
    /// Configuration re-read on reloads that name no path.
    pub config_path: Option<PathBuf>,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            retain_adjacent: true,
            config_path: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct RuntimeStats {
    pub unmatched_exits: AtomicU64,
    pub backend_failures: AtomicU64,
    pub reloads_applied: AtomicU64,
    pub reloads_failed: AtomicU64,
}

/// Observable state of the open session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionView {
    pub owner: ThreadToken,
    pub address: u64,
    pub depth: u64,
    pub group: usize,
    pub pending_stop: bool,
}

struct Live<S> {
    epoch: Arc<RegistryEpoch>,
    address: u64,
    handle: S,
    depth: u64,
    group: usize,
    pending_stop: bool,
}

type Sink = Box<dyn Fn(&ProfileReport) + Send + Sync>;

pub struct CallbackRuntime<B: CounterBackend> {
    backend: B,
    symbols: SymbolMap,
    registry: ContextRegistry,
    options: RuntimeOptions,
    owner: AtomicU64,
    live: Mutex<Option<Live<B::Session>>>,
    sink: Sink,
    finished: AtomicBool,
    stats: RuntimeStats,
}

impl<B: CounterBackend> CallbackRuntime<B> {
    pub fn new(backend: B, symbols: SymbolMap, epoch: RegistryEpoch, options: RuntimeOptions) -> Self {
        Self {
            backend,
            symbols,
            registry: ContextRegistry::new(epoch),
            options,
            owner: AtomicU64::new(NO_OWNER),
            live: Mutex::new(None),
            sink: Box::new(|_| {}),
            finished: AtomicBool::new(false),
            stats: RuntimeStats::default(),
        }
    }

    /// Installs `config` as epoch 0.
    pub fn from_config(
        backend: B,
        symbols: SymbolMap,
        config: &ContextConfig,
        options: RuntimeOptions,
    ) -> Result<(Self, Vec<InstallWarning>), ValidationError> {
        let (epoch, warnings) = install(config, &symbols, backend.descriptor(), 0)?;
        Ok((Self::new(backend, symbols, epoch, options), warnings))
    }

    /// Receives partial reports on reload and the final report at exit.
    pub fn with_sink(mut self, sink: impl Fn(&ProfileReport) + Send + Sync + 'static) -> Self {
        self.sink = Box::new(sink);
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn symbols(&self) -> &SymbolMap {
        &self.symbols
    }

    pub fn registry(&self) -> &ContextRegistry {
        &self.registry
    }

    pub fn stats(&self) -> &RuntimeStats {
        &self.stats
    }

    pub fn session(&self) -> Option<SessionView> {
        let owner = self.owner.load(Ordering::Acquire);
        self.lock_live().as_ref().map(|l| SessionView {
            owner,
            address: l.address,
            depth: l.depth,
            group: l.group,
            pending_stop: l.pending_stop,
        })
    }

    fn lock_live(&self) -> MutexGuard<'_, Option<Live<B::Session>>> {
        self.live.lock().unwrap_or_else(|e| e.into_inner())
    }

    #[inline]
    pub fn on_function_entry(&self, function: u64, _call_site: u64) {
        self.enter(current_thread_token(), function);
    }

    #[inline]
    pub fn on_function_exit(&self, function: u64, _call_site: u64) {
        self.exit(current_thread_token(), function);
    }

    /// Entry of `function` on `thread`.
    pub fn enter(&self, thread: ThreadToken, function: u64) {
        if self.finished.load(Ordering::Relaxed) {
            return;
        }
        let owner = self.owner.load(Ordering::Acquire);
        if owner != NO_OWNER {
            if owner != thread {
                self.count_only(function);
                return;
            }
            if self.owner_enter(function) {
                return;
            }
        }
        self.idle_enter(thread, function);
    }

    /// Exit of `function` on `thread`.
    pub fn exit(&self, thread: ThreadToken, function: u64) {
        if thread == DETACHED_THREAD || self.owner.load(Ordering::Acquire) != thread {
            return;
        }
        let mut slot = self.lock_live();
        let Some(live) = slot.as_mut() else {
            return;
        };
        if live.address == function {
            if live.depth == 0 {
                self.stats.unmatched_exits.fetch_add(1, Ordering::Relaxed);
                log::debug!("unmatched exit from {}", self.symbols.resolve(function));
                return;
            }
            live.depth -= 1;
            if live.depth == 0 {
                if self.options.retain_adjacent {
                    live.pending_stop = true;
                } else {
                    self.close_live(&mut slot);
                }
            }
        } else if live.pending_stop {
            self.close_live(&mut slot);
        }
    }

    fn count_only(&self, function: u64) {
        if let Some(ctx) = self.registry.load().lookup(function) {
            ctx.record_call();
        }
    }

    /// Entry on the owning thread. Returns false when a retained session was
    /// closed and the entry still has to be handled as if idle.
    fn owner_enter(&self, function: u64) -> bool {
        let mut slot = self.lock_live();
        let Some(live) = slot.as_mut() else {
            return false;
        };
        if live.address != function {
            if live.pending_stop {
                self.close_live(&mut slot);
                return false;
            }
            if let Some(ctx) = live.epoch.lookup(function) {
                ctx.record_call();
            }
            return true;
        }
        let epoch = Arc::clone(&live.epoch);
        let Some(ctx) = epoch.lookup(function) else {
            return true;
        };
        let call = ctx.record_call();
        if live.pending_stop {
            live.pending_stop = false;
            live.depth = 1;
            let next = ctx.group_for_call(call);
            if next != live.group {
                let switched = self
                    .backend
                    .stop_group(&mut live.handle, live.group)
                    .and_then(|()| self.backend.start_group(&mut live.handle, next));
                if let Err(e) = switched {
                    self.close_live(&mut slot);
                    self.fail(ctx.address, &e);
                    ctx.disable();
                    return true;
                }
                live.group = next;
            }
        } else {
            live.depth += 1;
        }
        ctx.attribute_call(live.group);
        true
    }

    fn idle_enter(&self, thread: ThreadToken, function: u64) {
        if self.registry.is_reload_pending() {
            self.try_reload(thread);
        }
        {
            let epoch = self.registry.load();
            let Some(ctx) = epoch.lookup(function) else {
                return;
            };
            if !ctx.is_measurable()
                || thread == DETACHED_THREAD
                || self
                    .owner
                    .compare_exchange(NO_OWNER, thread, Ordering::Acquire, Ordering::Relaxed)
                    .is_err()
            {
                ctx.record_call();
                return;
            }
        }
        // Slot claimed; a reload may have landed between the lookup and the
        // claim, so look again in the epoch that is now frozen.
        let epoch = self.registry.load_full();
        let Some(ctx) = epoch.lookup(function) else {
            self.owner.store(NO_OWNER, Ordering::Release);
            return;
        };
        let call = ctx.record_call();
        if !ctx.is_measurable() {
            self.owner.store(NO_OWNER, Ordering::Release);
            return;
        }
        let group = ctx.group_for_call(call);
        let mut handle = match self.backend.open_session(&ctx.groups) {
            Ok(h) => h,
            Err(e) => {
                self.fail(function, &e);
                ctx.disable();
                self.owner.store(NO_OWNER, Ordering::Release);
                return;
            }
        };
        if let Err(e) = self.backend.start_group(&mut handle, group) {
            self.backend.close_session(handle);
            self.fail(function, &e);
            ctx.disable();
            self.owner.store(NO_OWNER, Ordering::Release);
            return;
        }
        ctx.attribute_call(group);
        ctx.note_session();
        let address = ctx.address;
        *self.lock_live() = Some(Live {
            epoch,
            address,
            handle,
            depth: 1,
            group,
            pending_stop: false,
        });
    }

    fn close_live(&self, slot: &mut Option<Live<B::Session>>) {
        if let Some(live) = slot.take() {
            let samples = self.backend.close_session(live.handle);
            if let Some(ctx) = live.epoch.lookup(live.address) {
                ctx.accumulate(&samples);
            }
            self.owner.store(NO_OWNER, Ordering::Release);
        }
    }

    fn fail(&self, function: u64, err: &BackendError) {
        self.stats.backend_failures.fetch_add(1, Ordering::Relaxed);
        log::warn!(
            "counters for {} disabled: {err}",
            self.symbols.resolve(function)
        );
    }

    fn try_reload(&self, thread: ThreadToken) {
        if thread == DETACHED_THREAD
            || self
                .owner
                .compare_exchange(NO_OWNER, thread, Ordering::Acquire, Ordering::Relaxed)
                .is_err()
        {
            return;
        }
        let outcome = self.registry.apply_pending_reload(
            &self.symbols,
            self.backend.descriptor(),
            self.options.config_path.as_deref(),
        );
        self.owner.store(NO_OWNER, Ordering::Release);
        match outcome {
            ReloadOutcome::None => {}
            ReloadOutcome::Applied {
                epoch_id,
                flushed,
                warnings,
            } => {
                self.stats.reloads_applied.fetch_add(1, Ordering::Relaxed);
                for w in &warnings {
                    log::warn!("{w}");
                }
                log::info!("configuration epoch {epoch_id} installed");
                (self.sink)(&flushed);
            }
            ReloadOutcome::Failed(e) => {
                self.stats.reloads_failed.fetch_add(1, Ordering::Relaxed);
                log::warn!("reload failed, keeping previous configuration: {e}");
            }
        }
    }

    /// Closes any open session and emits the final report. Later callbacks
    /// are ignored; only the first call returns a report.
    pub fn on_process_exit(&self) -> Option<ProfileReport> {
        if self.finished.swap(true, Ordering::AcqRel) {
            return None;
        }
        self.close_live(&mut self.lock_live());
        let report = self.registry.load().report();
        (self.sink)(&report);
        Some(report)
    }

    /// Counts so far, without closing anything.
    pub fn snapshot(&self) -> ProfileReport {
        self.registry.load().report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{BackendOp, SimulatedBackend};
    use crate::config::{EventSpec, FunctionContextSpec};
    use crate::symbols::Symbol;

    const FOO: u64 = 0x1000;
    const BAR: u64 = 0x2000;
    const BAZ: u64 = 0x3000;
    const T1: ThreadToken = 1;
    const T2: ThreadToken = 2;

    fn symbols() -> SymbolMap {
        SymbolMap::from_symbols(
            [(FOO, "foo"), (BAR, "bar"), (BAZ, "baz")]
                .into_iter()
                .map(|(start, name)| Symbol {
                    start,
                    size: 0x100,
                    name: name.into(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn runtime(functions: Vec<FunctionContextSpec>, retain: bool) -> CallbackRuntime<SimulatedBackend> {
        let cfg = ContextConfig::new("a.out", functions);
        CallbackRuntime::from_config(
            SimulatedBackend::default(),
            symbols(),
            &cfg,
            RuntimeOptions {
                retain_adjacent: retain,
                config_path: None,
            },
        )
        .unwrap()
        .0
    }

    fn spec(name: &str, events: &[&str]) -> FunctionContextSpec {
        FunctionContextSpec::new(name, events.iter().map(|e| EventSpec::new(*e)).collect())
    }

    fn opens(rt: &CallbackRuntime<SimulatedBackend>) -> usize {
        rt.backend()
            .op_log()
            .iter()
            .filter(|op| matches!(op, BackendOp::Open { .. }))
            .count()
    }

    #[test]
    fn repeated_calls_reuse_one_session() {
        let rt = runtime(vec![spec("foo", &["E"])], true);
        for _ in 0..1000 {
            rt.enter(T1, FOO);
            rt.backend().inject("E", 1);
            rt.exit(T1, FOO);
        }
        let r = rt.on_process_exit().unwrap();
        let foo = r.entry("foo").unwrap();
        assert_eq!(foo.call_count, 1000);
        assert_eq!(foo.groups[0].values, vec![1000]);
        assert_eq!(opens(&rt), 1);
    }

    #[test]
    fn without_retention_every_call_opens() {
        let rt = runtime(vec![spec("foo", &["E"])], false);
        for _ in 0..10 {
            rt.enter(T1, FOO);
            rt.exit(T1, FOO);
        }
        assert_eq!(opens(&rt), 10);
        assert_eq!(rt.backend().open_sessions(), 0);
    }

    #[test]
    fn nested_monitored_function_is_counted_not_measured() {
        let rt = runtime(vec![spec("foo", &["E"]), spec("bar", &["E"])], true);
        rt.enter(T1, FOO);
        rt.enter(T1, BAR);
        rt.backend().inject("E", 3);
        rt.exit(T1, BAR);
        rt.exit(T1, FOO);
        let r = rt.on_process_exit().unwrap();
        assert_eq!(r.entry("bar").unwrap().call_count, 1);
        assert_eq!(r.entry("bar").unwrap().groups[0].values, vec![0]);
        assert_eq!(r.entry("foo").unwrap().groups[0].values, vec![3]);
        let epoch = rt.registry().load();
        assert_eq!(epoch.by_name("bar").unwrap().session_count(), 0);
    }

    #[test]
    fn retained_session_closes_on_other_callback() {
        let rt = runtime(vec![spec("foo", &["E"])], true);
        rt.enter(T1, FOO);
        rt.exit(T1, FOO);
        assert!(rt.session().unwrap().pending_stop);
        rt.enter(T1, BAZ);
        assert!(rt.session().is_none());
        rt.exit(T1, BAZ);
        rt.enter(T1, FOO);
        assert_eq!(opens(&rt), 2);
    }

    #[test]
    fn recursion_keeps_depth() {
        let rt = runtime(vec![spec("foo", &["E"])], true);
        for _ in 0..5 {
            rt.enter(T1, FOO);
        }
        assert_eq!(rt.session().unwrap().depth, 5);
        for _ in 0..5 {
            rt.exit(T1, FOO);
        }
        let s = rt.session().unwrap();
        assert_eq!((s.depth, s.pending_stop), (0, true));
        rt.exit(T1, FOO);
        assert_eq!(rt.stats().unmatched_exits.load(Ordering::Relaxed), 1);
        let r = rt.on_process_exit().unwrap();
        assert_eq!(r.entry("foo").unwrap().call_count, 5);
        assert_eq!(r.entry("foo").unwrap().groups[0].calls, 5);
    }

    #[test]
    fn other_threads_only_count() {
        let rt = runtime(vec![spec("foo", &["E"])], true);
        rt.enter(T1, FOO);
        rt.enter(T2, FOO);
        rt.exit(T2, FOO);
        assert_eq!(rt.session().unwrap().owner, T1);
        rt.exit(T1, FOO);
        let r = rt.on_process_exit().unwrap();
        assert_eq!(r.entry("foo").unwrap().call_count, 2);
        assert_eq!(r.entry("foo").unwrap().groups[0].calls, 1);
    }

    #[test]
    fn multiplexing_alternates_groups() {
        let backend = SimulatedBackend::new(crate::backend::BackendDescriptor::new("s").with_group_width(1));
        let cfg = ContextConfig::new("a.out", vec![spec("foo", &["A", "B"]).with_multiplex_period(2)]);
        let (rt, _) = CallbackRuntime::from_config(backend, symbols(), &cfg, RuntimeOptions::default()).unwrap();
        for _ in 0..10 {
            rt.enter(T1, FOO);
            rt.backend().inject("A", 1);
            rt.backend().inject("B", 10);
            rt.exit(T1, FOO);
        }
        let r = rt.on_process_exit().unwrap();
        let foo = r.entry("foo").unwrap();
        assert_eq!(foo.groups[0].calls, 6);
        assert_eq!(foo.groups[1].calls, 4);
        assert_eq!(foo.groups[0].values, vec![6]);
        assert_eq!(foo.groups[1].values, vec![40]);
    }

    #[test]
    fn backend_failure_disables_context() {
        let rt = runtime(vec![spec("foo", &["E"])], true);
        rt.backend().set_fail_opens(true);
        rt.enter(T1, FOO);
        rt.exit(T1, FOO);
        rt.enter(T1, FOO);
        rt.exit(T1, FOO);
        assert_eq!(rt.stats().backend_failures.load(Ordering::Relaxed), 1);
        let r = rt.on_process_exit().unwrap();
        assert_eq!(r.entry("foo").unwrap().call_count, 2);
    }

    #[test]
    fn count_only_context_never_opens() {
        let rt = runtime(vec![spec("foo", &[])], true);
        rt.enter(T1, FOO);
        rt.exit(T1, FOO);
        assert_eq!(opens(&rt), 0);
        assert_eq!(rt.on_process_exit().unwrap().entry("foo").unwrap().call_count, 1);
    }

    #[test]
    fn reload_waits_for_quiescence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        std::fs::write(
            &path,
            crate::config::serialize_config(&ContextConfig::new("a.out", vec![spec("bar", &["E"])])),
        )
        .unwrap();
        let flushed = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&flushed);
        let rt = runtime(vec![spec("foo", &["E"])], true)
            .with_sink(move |r| sink.lock().unwrap().push(r.clone()));
        rt.enter(T1, FOO);
        rt.registry().request_reload(&path);
        rt.enter(T1, BAR);
        rt.exit(T1, BAR);
        assert_eq!(rt.registry().load().epoch_id, 0);
        rt.exit(T1, FOO);
        rt.enter(T1, BAR);
        assert_eq!(rt.registry().load().epoch_id, 1);
        assert_eq!(rt.session().unwrap().address, BAR);
        let reports = flushed.lock().unwrap().clone();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].epoch_id, 0);
        assert_eq!(reports[0].entry("foo").unwrap().call_count, 1);
    }

    #[test]
    fn process_exit_is_idempotent() {
        let rt = runtime(vec![spec("foo", &["E"])], true);
        rt.enter(T1, FOO);
        assert!(rt.on_process_exit().is_some());
        assert_eq!(rt.backend().open_sessions(), 0);
        assert!(rt.on_process_exit().is_none());
        rt.enter(T1, FOO);
        assert_eq!(rt.snapshot().entry("foo").unwrap().call_count, 1);
    }
}
