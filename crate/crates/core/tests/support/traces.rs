//! Random callback traces replayed through the runtime and through a
//! plain-data reference model of the session rules.
//!
//! Shared by the core property tests and the acceptance binary.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use scalpel_core::backend::{BackendDescriptor, BackendOp, SimulatedBackend};
use scalpel_core::config::{ContextConfig, EventSpec, FunctionContextSpec};
use scalpel_core::multiplex_group_index;
use scalpel_core::runtime::{CallbackRuntime, RuntimeOptions, SessionView};
use scalpel_core::symbols::{Symbol, SymbolMap};

pub const MAX_FUNCTIONS: usize = 8;
pub const MAX_DEPTH: usize = 64;
pub const EVENT_NAMES: [&str; 6] = ["E0", "E1", "E2", "E3", "E4", "E5"];

pub fn address(f: usize) -> u64 {
    0x1000 * (f as u64 + 1)
}

pub fn symbols(n: usize) -> SymbolMap {
    SymbolMap::from_symbols(
        (0..n)
            .map(|f| Symbol {
                start: address(f),
                size: 0x100,
                name: format!("f{f}"),
            })
            .collect(),
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Enter,
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub thread: u64,
    pub kind: Kind,
    pub func: usize,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub functions: usize,
    pub width: usize,
    pub config: ContextConfig,
    pub retain: bool,
    pub trace: Vec<Event>,
}

fn random_config(rng: &mut StdRng, functions: usize, width: usize) -> ContextConfig {
    let mut specs = Vec::new();
    for f in 0..functions {
        if !rng.random_bool(0.5) {
            continue;
        }
        let k = rng.random_range(0..=4usize);
        let mut names: Vec<&str> = EVENT_NAMES.to_vec();
        for i in 0..names.len() {
            let j = rng.random_range(i..names.len());
            names.swap(i, j);
        }
        let events = names[..k].iter().map(|n| EventSpec::new(*n)).collect();
        let period = if k > width || rng.random_bool(0.5) {
            rng.random_range(1..=5u64)
        } else {
            0
        };
        specs.push(FunctionContextSpec::new(format!("f{f}"), events).with_multiplex_period(period));
    }
    ContextConfig::new("trace", specs)
}

struct Gen<'a> {
    rng: &'a mut StdRng,
    functions: usize,
    thread: u64,
    budget: usize,
    out: Vec<Event>,
}

impl Gen<'_> {
    fn call(&mut self, f: usize, depth: usize) {
        self.push(Kind::Enter, f);
        if depth < MAX_DEPTH && self.rng.random_bool(0.35) {
            self.body(depth);
        }
        self.push(Kind::Exit, f);
    }

    fn push(&mut self, kind: Kind, func: usize) {
        self.out.push(Event {
            thread: self.thread,
            kind,
            func,
        });
    }

    /// Calls made from a frame at `depth` (0 = top level).
    fn body(&mut self, depth: usize) {
        let children = if depth == 0 {
            self.rng.random_range(1..=8usize)
        } else {
            self.rng.random_range(0..=3usize)
        };
        for _ in 0..children {
            if self.budget == 0 {
                return;
            }
            self.budget -= 1;
            let f = self.rng.random_range(0..self.functions);
            if depth < MAX_DEPTH && self.rng.random_bool(0.08) {
                // Recursive chain down to at most MAX_DEPTH frames.
                let len = self.rng.random_range(1..=MAX_DEPTH - depth);
                for _ in 0..len {
                    self.push(Kind::Enter, f);
                }
                if depth + len < MAX_DEPTH && self.rng.random_bool(0.5) {
                    self.body(depth + len);
                }
                for _ in 0..len {
                    self.push(Kind::Exit, f);
                }
                continue;
            }
            let reps = if self.rng.random_bool(0.3) {
                self.rng.random_range(2..=6usize)
            } else {
                1
            };
            for _ in 0..reps {
                self.call(f, depth + 1);
            }
        }
    }
}

/// A random scenario: configuration, one or two threads, nested traces with
/// recursion up to [`MAX_DEPTH`], runs of adjacent calls and the occasional
/// unmatched exit.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = StdRng::seed_from_u64(seed);
    let functions = rng.random_range(1..=MAX_FUNCTIONS);
    let width = rng.random_range(1..=3usize);
    let config = random_config(&mut rng, functions, width);
    let threads = if rng.random_bool(0.3) { 2 } else { 1 };
    let retain = rng.random_bool(0.8);
    let mut per_thread = Vec::new();
    for t in 1..=threads {
        let mut g = Gen {
            rng: &mut rng,
            functions,
            thread: t,
            budget: 120,
            out: Vec::new(),
        };
        g.body(0);
        if g.rng.random_bool(0.05) {
            let f = g.rng.random_range(0..functions);
            g.push(Kind::Exit, f);
        }
        per_thread.push(g.out);
    }
    // Interleave, keeping each thread's order.
    let mut trace = Vec::new();
    let mut cursors = vec![0usize; per_thread.len()];
    loop {
        let live: Vec<usize> = (0..per_thread.len())
            .filter(|&t| cursors[t] < per_thread[t].len())
            .collect();
        if live.is_empty() {
            break;
        }
        let t = live[rng.random_range(0..live.len())];
        let burst = rng.random_range(1..=6usize);
        for _ in 0..burst {
            if cursors[t] < per_thread[t].len() {
                trace.push(per_thread[t][cursors[t]]);
                cursors[t] += 1;
            }
        }
    }
    Scenario {
        functions,
        width,
        config,
        retain,
        trace,
    }
}

/// Single-thread trace of runs of adjacent top-level calls. Consecutive runs
/// use different functions. Returns the trace and the number of runs.
pub fn adjacent_runs_scenario(seed: u64) -> (Scenario, usize) {
    let mut rng = StdRng::seed_from_u64(seed);
    let functions = rng.random_range(2..=MAX_FUNCTIONS);
    let specs = (0..functions)
        .map(|f| FunctionContextSpec::new(format!("f{f}"), vec![EventSpec::new("E0")]))
        .collect();
    let config = ContextConfig::new("adjacent", specs);
    let runs = rng.random_range(1..=10usize);
    let mut g = Gen {
        rng: &mut rng,
        functions,
        thread: 1,
        budget: 0,
        out: Vec::new(),
    };
    let mut last = usize::MAX;
    for _ in 0..runs {
        let mut f = g.rng.random_range(0..functions);
        if f == last {
            f = (f + 1) % functions;
        }
        last = f;
        for _ in 0..g.rng.random_range(1..=20usize) {
            g.push(Kind::Enter, f);
            // Nested calls inside the call do not break adjacency.
            if g.rng.random_bool(0.3) {
                let inner = g.rng.random_range(0..functions);
                g.push(Kind::Enter, inner);
                g.push(Kind::Exit, inner);
            }
            g.push(Kind::Exit, f);
        }
    }
    let trace = g.out;
    (
        Scenario {
            functions,
            width: 4,
            config,
            retain: true,
            trace,
        },
        runs,
    )
}

/// Ticks injected for `unit` after trace step `step`.
pub fn ticks(step: usize, unit: usize) -> u64 {
    1 + ((step * 7 + unit * 3) % 11) as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ModelSession {
    owner: u64,
    func: usize,
    depth: u64,
    group: usize,
    pending: bool,
}

/// Reference model, written directly from the session rules over plain data.
struct Model {
    retain: bool,
    /// Per monitored function: multiplex period and unit-name groups.
    monitored: BTreeMap<usize, (u64, Vec<Vec<String>>)>,
    session: Option<ModelSession>,
    calls: BTreeMap<usize, u64>,
    group_calls: BTreeMap<usize, Vec<u64>>,
    values: BTreeMap<usize, Vec<Vec<u64>>>,
    sessions: BTreeMap<usize, u64>,
    opened: Vec<usize>,
    unmatched: u64,
}

impl Model {
    fn new(config: &ContextConfig, width: usize, retain: bool) -> Self {
        let mut monitored = BTreeMap::new();
        for spec in &config.functions {
            let f: usize = spec.function_name[1..].parse().unwrap();
            let units: Vec<String> = spec.events.iter().map(|e| e.event_id.clone()).collect();
            let groups: Vec<Vec<String>> = units.chunks(width).map(|c| c.to_vec()).collect();
            monitored.insert(f, (spec.multiplex_period, groups));
        }
        let zeros = |f: &usize| {
            let groups = &monitored[f].1;
            (
                vec![0; groups.len()],
                groups.iter().map(|g| vec![0; g.len()]).collect::<Vec<_>>(),
            )
        };
        let mut group_calls = BTreeMap::new();
        let mut values = BTreeMap::new();
        for f in monitored.keys() {
            let (g, v) = zeros(f);
            group_calls.insert(*f, g);
            values.insert(*f, v);
        }
        Self {
            retain,
            calls: monitored.keys().map(|f| (*f, 0)).collect(),
            sessions: monitored.keys().map(|f| (*f, 0)).collect(),
            monitored,
            session: None,
            group_calls,
            values,
            opened: Vec::new(),
            unmatched: 0,
        }
    }

    fn group_for(&self, f: usize) -> usize {
        let (period, groups) = &self.monitored[&f];
        multiplex_group_index(self.calls[&f], *period, groups.len())
    }

    fn close(&mut self) {
        self.session = None;
    }

    fn enter(&mut self, thread: u64, f: usize) {
        if let Some(s) = self.session.clone() {
            if s.owner != thread {
                if let Some(c) = self.calls.get_mut(&f) {
                    *c += 1;
                }
                return;
            }
            if s.func == f {
                *self.calls.get_mut(&f).unwrap() += 1;
                let group = if s.pending { self.group_for(f) } else { s.group };
                let s = self.session.as_mut().unwrap();
                if s.pending {
                    s.pending = false;
                    s.depth = 1;
                    s.group = group;
                } else {
                    s.depth += 1;
                }
                self.group_calls.get_mut(&f).unwrap()[group] += 1;
                return;
            }
            if !s.pending {
                if let Some(c) = self.calls.get_mut(&f) {
                    *c += 1;
                }
                return;
            }
            self.close();
        }
        let Some(c) = self.calls.get_mut(&f) else {
            return;
        };
        *c += 1;
        if self.monitored[&f].1.is_empty() {
            return;
        }
        let group = self.group_for(f);
        self.group_calls.get_mut(&f).unwrap()[group] += 1;
        *self.sessions.get_mut(&f).unwrap() += 1;
        self.opened.push(f);
        self.session = Some(ModelSession {
            owner: thread,
            func: f,
            depth: 1,
            group,
            pending: false,
        });
    }

    fn exit(&mut self, thread: u64, f: usize) {
        let Some(s) = self.session.as_mut() else {
            return;
        };
        if s.owner != thread {
            return;
        }
        if s.func == f {
            if s.depth == 0 {
                self.unmatched += 1;
                return;
            }
            s.depth -= 1;
            if s.depth == 0 {
                if self.retain {
                    s.pending = true;
                } else {
                    self.close();
                }
            }
        } else if s.pending {
            self.close();
        }
    }

    fn inject(&mut self, step: usize) {
        let Some(s) = &self.session else {
            return;
        };
        let groups = &self.monitored[&s.func].1;
        let vals = self.values.get_mut(&s.func).unwrap();
        for (slot, unit) in groups[s.group].iter().enumerate() {
            let idx = EVENT_NAMES.iter().position(|n| n == unit).unwrap();
            vals[s.group][slot] += ticks(step, idx);
        }
    }

    fn view(&self) -> Option<(u64, u64, u64, usize, bool)> {
        self.session
            .as_ref()
            .map(|s| (s.owner, address(s.func), s.depth, s.group, s.pending))
    }
}

fn view_tuple(v: Option<SessionView>) -> Option<(u64, u64, u64, usize, bool)> {
    v.map(|v| (v.owner, v.address, v.depth, v.group, v.pending_stop))
}

/// Structural checks on a backend log: one session at a time, one counting
/// group at a time, every start stopped and every open closed.
pub fn check_op_log(log: &[BackendOp]) -> Result<usize, String> {
    let mut open: Option<u64> = None;
    let mut active: Option<usize> = None;
    let mut opens = 0;
    for (i, op) in log.iter().enumerate() {
        match *op {
            BackendOp::Open { session, .. } => {
                if let Some(other) = open {
                    return Err(format!("op {i}: session {session} opened while {other} is open"));
                }
                open = Some(session);
                opens += 1;
            }
            BackendOp::Start { session, group } => {
                if open != Some(session) {
                    return Err(format!("op {i}: start on session {session} which is not open"));
                }
                if let Some(a) = active {
                    return Err(format!("op {i}: group {group} started while {a} counts"));
                }
                active = Some(group);
            }
            BackendOp::Stop { session, group } => {
                if open != Some(session) || active != Some(group) {
                    return Err(format!("op {i}: stop of group {group} that is not counting"));
                }
                active = None;
            }
            BackendOp::Read { .. } => {}
            BackendOp::Close { session } => {
                if open != Some(session) {
                    return Err(format!("op {i}: close of session {session} which is not open"));
                }
                if active.is_some() {
                    return Err(format!("op {i}: session {session} closed with a group counting"));
                }
                open = None;
            }
        }
    }
    if let Some(s) = open {
        return Err(format!("session {s} never closed"));
    }
    Ok(opens)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Outcome {
    pub events: usize,
    pub sessions: usize,
}

/// Replays `scenario` through the runtime and the model and checks every
/// property. Returns a description of the first violation.
pub fn check_scenario(scenario: &Scenario) -> Result<Outcome, String> {
    let backend = SimulatedBackend::new(BackendDescriptor::new("sim").with_group_width(scenario.width));
    let (rt, warnings) = CallbackRuntime::from_config(
        backend,
        symbols(scenario.functions),
        &scenario.config,
        RuntimeOptions {
            retain_adjacent: scenario.retain,
            config_path: None,
        },
    )
    .map_err(|e| format!("install failed: {e}"))?;
    if !warnings.is_empty() {
        return Err(format!("unexpected install warnings: {warnings:?}"));
    }
    let mut model = Model::new(&scenario.config, scenario.width, scenario.retain);
    let mut entries: BTreeMap<usize, u64> = BTreeMap::new();

    for (step, ev) in scenario.trace.iter().enumerate() {
        let before = model.session.clone();
        match ev.kind {
            Kind::Enter => {
                *entries.entry(ev.func).or_default() += 1;
                rt.enter(ev.thread, address(ev.func));
                model.enter(ev.thread, ev.func);
            }
            Kind::Exit => {
                rt.exit(ev.thread, address(ev.func));
                model.exit(ev.thread, ev.func);
            }
        }
        let got = view_tuple(rt.session());
        if got != model.view() {
            return Err(format!(
                "step {step} {ev:?}: runtime session {got:?}, model {:?}",
                model.view()
            ));
        }
        // Parent wins: a live (not pending) session survives any entry.
        if let (Some(b), Kind::Enter) = (&before, ev.kind) {
            if !b.pending && got.map(|g| g.1) != Some(address(b.func)) {
                return Err(format!("step {step}: entry of f{} displaced the session of f{}", ev.func, b.func));
            }
        }
        for (idx, name) in EVENT_NAMES.iter().enumerate() {
            rt.backend().inject(name, ticks(step, idx));
        }
        model.inject(step);
    }
    let report = rt.on_process_exit().ok_or("no final report")?;
    model.close();

    if rt.stats().backend_failures.load(std::sync::atomic::Ordering::Relaxed) != 0 {
        return Err("backend reported a state error".into());
    }
    let opens = check_op_log(&rt.backend().op_log())?;
    if opens != model.opened.len() {
        return Err(format!("{opens} sessions opened, model expects {}", model.opened.len()));
    }
    let unmatched = rt.stats().unmatched_exits.load(std::sync::atomic::Ordering::Relaxed);
    if unmatched != model.unmatched {
        return Err(format!("{unmatched} unmatched exits, model expects {}", model.unmatched));
    }
    let epoch = rt.registry().load();
    for (&f, &(_, ref groups)) in &model.monitored {
        let name = format!("f{f}");
        let entry = report.entry(&name).ok_or(format!("{name} missing from report"))?;
        let expected_calls = entries.get(&f).copied().unwrap_or(0);
        if entry.call_count != expected_calls {
            return Err(format!("{name}: call_count {} but {expected_calls} entries", entry.call_count));
        }
        let group_calls: Vec<u64> = entry.groups.iter().map(|g| g.calls).collect();
        if group_calls != model.group_calls[&f] {
            return Err(format!("{name}: group calls {group_calls:?}, model {:?}", model.group_calls[&f]));
        }
        if group_calls.iter().sum::<u64>() > entry.call_count {
            return Err(format!("{name}: more attributed calls than calls"));
        }
        let values: Vec<Vec<u64>> = entry.groups.iter().map(|g| g.values.clone()).collect();
        if values != model.values[&f] {
            return Err(format!("{name}: values {values:?}, model {:?}", model.values[&f]));
        }
        let unit_names: Vec<Vec<String>> = entry.groups.iter().map(|g| g.events.clone()).collect();
        if &unit_names != groups {
            return Err(format!("{name}: groups {unit_names:?}, expected {groups:?}"));
        }
        let sessions = epoch.by_name(&name).unwrap().session_count();
        if sessions != model.sessions[&f] {
            return Err(format!("{name}: {sessions} sessions, model {}", model.sessions[&f]));
        }
    }
    Ok(Outcome {
        events: scenario.trace.len(),
        sessions: opens,
    })
}

/// Retention minimality: exactly one session per run of adjacent calls.
pub fn check_adjacent(seed: u64) -> Result<(), String> {
    let (scenario, runs) = adjacent_runs_scenario(seed);
    let outcome = check_scenario(&scenario)?;
    if outcome.sessions != runs {
        return Err(format!("{} sessions for {runs} runs of adjacent calls", outcome.sessions));
    }
    Ok(())
}
