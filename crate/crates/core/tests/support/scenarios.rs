//! Scripted runs through the simulated backend.

#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use scalpel_core::backend::{BackendDescriptor, SimulatedBackend};
use scalpel_core::config::{serialize_config, ContextConfig, EventSpec, FunctionContextSpec};
use scalpel_core::report::{average_multiplexed, ProfileReport};
use scalpel_core::runtime::{CallbackRuntime, RuntimeOptions};
use scalpel_core::symbols::{Symbol, SymbolMap};

const HOT: u64 = 0x4000;

/// Per-call cost of each event: `base[i]`, optionally scaled by a uniform
/// factor in `[1 - jitter, 1 + jitter]` drawn per call and event.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub base: Vec<u64>,
    pub jitter: f64,
    pub seed: u64,
}

impl CostModel {
    pub fn costs(&self, calls: usize) -> Vec<Vec<u64>> {
        let mut rng = StdRng::seed_from_u64(self.seed);
        (0..calls)
            .map(|_| {
                self.base
                    .iter()
                    .map(|&b| {
                        if self.jitter == 0.0 {
                            b
                        } else {
                            let f = rng.random_range(1.0 - self.jitter..=1.0 + self.jitter);
                            (b as f64 * f).round() as u64
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventComparison {
    pub event: String,
    pub estimate: f64,
    pub exhaustive: f64,
}

impl EventComparison {
    pub fn relative_error(&self) -> f64 {
        (self.estimate - self.exhaustive).abs() / self.exhaustive
    }
}

fn hot_symbols() -> SymbolMap {
    SymbolMap::from_symbols(vec![Symbol {
        start: HOT,
        size: 0x40,
        name: "hot".into(),
    }])
    .unwrap()
}

fn event_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("EV{i}")).collect()
}

fn run_hot(costs: &[Vec<u64>], width: usize, period: u64) -> ProfileReport {
    let names = event_names(costs[0].len());
    let spec = FunctionContextSpec::new("hot", names.iter().map(EventSpec::new).collect())
        .with_multiplex_period(period);
    let backend = SimulatedBackend::new(BackendDescriptor::new("sim").with_group_width(width));
    backend.set_recording(false);
    let (rt, _) = CallbackRuntime::from_config(
        backend,
        hot_symbols(),
        &ContextConfig::new("hot", vec![spec]),
        RuntimeOptions::default(),
    )
    .unwrap();
    for call in costs {
        rt.enter(1, HOT);
        for (name, &c) in names.iter().zip(call) {
            rt.backend().inject(name, c);
        }
        rt.exit(1, HOT);
    }
    rt.on_process_exit().unwrap()
}

/// Measures the same per-call costs once with every event in one group and
/// once with one event per group rotated every `period` calls, and pairs the
/// multiplexed estimate with the exhaustive total for each event.
pub fn multiplex_vs_exhaustive(model: &CostModel, calls: usize, period: u64) -> Vec<EventComparison> {
    let costs = model.costs(calls);
    let n = model.base.len();
    let exhaustive = run_hot(&costs, n, 0);
    let multiplexed = run_hot(&costs, 1, period);
    let full = &exhaustive.entry("hot").unwrap().groups[0];
    let estimates = average_multiplexed(multiplexed.entry("hot").unwrap());
    event_names(n)
        .into_iter()
        .map(|event| {
            let slot = full.events.iter().position(|e| *e == event).unwrap();
            let estimate = estimates
                .estimates
                .iter()
                .find(|e| e.event == event)
                .map_or(f64::NAN, |e| e.estimate);
            EventComparison {
                exhaustive: full.values[slot] as f64,
                estimate,
                event,
            }
        })
        .collect()
}

pub const MEMORY: u64 = 0x1000;
pub const COMPUTE: u64 = 0x2000;
pub const EXTRA: u64 = 0x3000;

fn phase_symbols() -> SymbolMap {
    SymbolMap::from_symbols(
        [(MEMORY, "memory_phase"), (COMPUTE, "compute_phase"), (EXTRA, "extra_phase")]
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

fn phase_config(functions: &[(&str, &str)]) -> ContextConfig {
    ContextConfig::new(
        "phases",
        functions
            .iter()
            .map(|(f, e)| FunctionContextSpec::new(*f, vec![EventSpec::new(*e)]))
            .collect(),
    )
}

/// Alternating phases across a reload that drops `memory_phase` and adds
/// `extra_phase`. The reload is requested while a session is open, so it
/// must wait for the next quiescent entry.
pub fn reload_protocol() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let next = dir.path().join("next.cfg");
    std::fs::write(
        &next,
        serialize_config(&phase_config(&[("compute_phase", "FLOPS"), ("extra_phase", "FLOPS")])),
    )
    .map_err(|e| e.to_string())?;

    let flushed: Arc<Mutex<Vec<ProfileReport>>> = Arc::default();
    let sink = Arc::clone(&flushed);
    let (rt, _) = CallbackRuntime::from_config(
        SimulatedBackend::default(),
        phase_symbols(),
        &phase_config(&[("memory_phase", "CACHE_MISSES"), ("compute_phase", "FLOPS")]),
        RuntimeOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let rt = rt.with_sink(move |r| sink.lock().unwrap().push(r.clone()));
    let b = rt.backend().clone();

    let round = |fn_addr: u64, unit: &str, ticks: u64| {
        rt.enter(1, fn_addr);
        b.inject(unit, ticks);
        rt.exit(1, fn_addr);
    };

    for _ in 0..3 {
        round(MEMORY, "CACHE_MISSES", 10);
        round(COMPUTE, "FLOPS", 100);
    }
    rt.enter(1, MEMORY);
    rt.registry().request_reload(&next);
    b.inject("CACHE_MISSES", 10);
    rt.exit(1, MEMORY);
    if rt.registry().load().epoch_id != 0 {
        return Err("reload applied while a session was open".into());
    }
    // First entry after the retained session closes is the quiescent point.
    for _ in 0..2 {
        round(COMPUTE, "FLOPS", 1);
        round(MEMORY, "CACHE_MISSES", 1000);
        round(EXTRA, "FLOPS", 5);
    }
    let last = rt.on_process_exit().ok_or("no final report")?;
    let flushed = flushed.lock().unwrap().clone();

    let expect = |cond: bool, what: &str| if cond { Ok(()) } else { Err(what.to_string()) };
    expect(flushed.len() == 2, "expected one flushed and one final report")?;
    let epoch0 = &flushed[0];
    expect(epoch0.epoch_id == 0, "flushed report is not epoch 0")?;
    let mem0 = epoch0.entry("memory_phase").ok_or("epoch 0 lacks memory_phase")?;
    expect(mem0.call_count == 4, "epoch 0 memory_phase calls")?;
    expect(mem0.groups[0].values == vec![40], "epoch 0 memory_phase totals")?;
    let cmp0 = epoch0.entry("compute_phase").ok_or("epoch 0 lacks compute_phase")?;
    expect(cmp0.call_count == 3, "epoch 0 compute_phase calls")?;
    expect(cmp0.groups[0].values == vec![300], "epoch 0 compute_phase totals")?;
    expect(epoch0.entry("extra_phase").is_none(), "extra_phase monitored before it was added")?;

    expect(last.epoch_id == 1, "final report is not epoch 1")?;
    expect(last.entry("memory_phase").is_none(), "deleted memory_phase still monitored")?;
    let cmp1 = last.entry("compute_phase").ok_or("epoch 1 lacks compute_phase")?;
    expect(cmp1.call_count == 2, "epoch 1 compute_phase did not restart from zero")?;
    expect(cmp1.groups[0].values == vec![2], "epoch 1 compute_phase totals")?;
    let extra = last.entry("extra_phase").ok_or("added extra_phase not monitored")?;
    expect(extra.call_count == 2, "epoch 1 extra_phase calls")?;
    expect(extra.groups[0].values == vec![10], "epoch 1 extra_phase totals")?;
    Ok(())
}
