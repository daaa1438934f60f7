//! Deterministic in-memory backend.
//!
//! Counts only what the test harness injects with [`SimulatedBackend::inject`]
//! and records every operation so callers can replay the sequence.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use super::{
    Activation, BackendDescriptor, BackendError, CounterBackend, CounterSample, EventGroup,
    StateError,
};

/// One recorded backend call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendOp {
    Open { session: u64, groups: usize },
    Start { session: u64, group: usize },
    Stop { session: u64, group: usize },
    Read { session: u64, group: usize },
    Close { session: u64 },
}

impl BackendOp {
    pub fn session(&self) -> u64 {
        match *self {
            BackendOp::Open { session, .. }
            | BackendOp::Start { session, .. }
            | BackendOp::Stop { session, .. }
            | BackendOp::Read { session, .. }
            | BackendOp::Close { session } => session,
        }
    }
}

#[derive(Debug)]
struct SimSessionState {
    groups: Vec<EventGroup>,
    activation: Activation,
    values: Vec<Vec<u64>>,
}

#[derive(Debug, Default)]
struct SimState {
    next_id: u64,
    sessions: BTreeMap<u64, SimSessionState>,
    log: Vec<BackendOp>,
    recording: bool,
    fail_opens: bool,
}

/// Cloning yields another handle onto the same counters and log.
#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    descriptor: BackendDescriptor,
    state: Arc<Mutex<SimState>>,
}

/// Handle for one simulated session.
#[derive(Debug)]
pub struct SimSession {
    id: u64,
}

impl SimSession {
    pub fn id(&self) -> u64 {
        self.id
    }
}

impl Default for SimulatedBackend {
    fn default() -> Self {
        Self::new(BackendDescriptor::new("simulated"))
    }
}

impl SimulatedBackend {
    pub fn new(descriptor: BackendDescriptor) -> Self {
        Self {
            descriptor,
            state: Arc::new(Mutex::new(SimState {
                recording: true,
                ..SimState::default()
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Adds `ticks` to `unit` in every open session whose counting group
    /// measures it. Inactive groups do not see the ticks.
    pub fn inject(&self, unit: &str, ticks: u64) {
        let mut state = self.lock();
        for session in state.sessions.values_mut() {
            let Some(active) = session.activation.active() else {
                continue;
            };
            for (slot, u) in session.groups[active].units.iter().enumerate() {
                if u.is_named(unit) {
                    session.values[active][slot] += ticks;
                }
            }
        }
    }

    /// Number of sessions currently open.
    pub fn open_sessions(&self) -> usize {
        self.lock().sessions.len()
    }

    pub fn op_log(&self) -> Vec<BackendOp> {
        self.lock().log.clone()
    }

    pub fn take_op_log(&self) -> Vec<BackendOp> {
        std::mem::take(&mut self.lock().log)
    }

    /// Turns operation recording on or off (on by default). Long simulations
    /// switch it off to keep memory flat.
    pub fn set_recording(&self, on: bool) {
        self.lock().recording = on;
    }

    /// Makes subsequent `open_session` calls fail with a resource error.
    pub fn set_fail_opens(&self, fail: bool) {
        self.lock().fail_opens = fail;
    }

    /// Reads by raw id, so tests can probe a session after closing it.
    pub fn read_by_id(&self, session: u64, group: usize) -> Result<CounterSample, BackendError> {
        let state = self.lock();
        let s = state.sessions.get(&session).ok_or(StateError::Closed)?;
        s.activation.check_index(group)?;
        Ok(CounterSample {
            group_index: group,
            values: s.values[group].clone(),
        })
    }
}

fn record(state: &mut SimState, op: BackendOp) {
    if state.recording {
        state.log.push(op);
    }
}

impl CounterBackend for SimulatedBackend {
    type Session = SimSession;

    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn open_session(&self, groups: &[EventGroup]) -> Result<SimSession, BackendError> {
        let mut state = self.lock();
        if state.fail_opens {
            return Err(BackendError::Resource("simulated allocation failure".into()));
        }
        let id = state.next_id;
        state.next_id += 1;
        state.sessions.insert(
            id,
            SimSessionState {
                groups: groups.to_vec(),
                activation: Activation::new(groups.len()),
                values: groups.iter().map(|g| vec![0; g.len()]).collect(),
            },
        );
        record(
            &mut state,
            BackendOp::Open {
                session: id,
                groups: groups.len(),
            },
        );
        Ok(SimSession { id })
    }

    fn start_group(&self, session: &mut SimSession, group: usize) -> Result<(), BackendError> {
        let mut state = self.lock();
        let s = state.sessions.get_mut(&session.id).ok_or(StateError::Closed)?;
        s.activation.start(group)?;
        record(
            &mut state,
            BackendOp::Start {
                session: session.id,
                group,
            },
        );
        Ok(())
    }

    fn stop_group(&self, session: &mut SimSession, group: usize) -> Result<(), BackendError> {
        let mut state = self.lock();
        let s = state.sessions.get_mut(&session.id).ok_or(StateError::Closed)?;
        s.activation.stop(group)?;
        record(
            &mut state,
            BackendOp::Stop {
                session: session.id,
                group,
            },
        );
        Ok(())
    }

    fn read_group(&self, session: &SimSession, group: usize) -> Result<CounterSample, BackendError> {
        let sample = self.read_by_id(session.id, group)?;
        record(
            &mut self.lock(),
            BackendOp::Read {
                session: session.id,
                group,
            },
        );
        Ok(sample)
    }

    fn close_session(&self, session: SimSession) -> Vec<CounterSample> {
        let mut state = self.lock();
        let Some(mut s) = state.sessions.remove(&session.id) else {
            return Vec::new();
        };
        if let Some(active) = s.activation.active() {
            let _ = s.activation.stop(active);
            record(
                &mut state,
                BackendOp::Stop {
                    session: session.id,
                    group: active,
                },
            );
        }
        record(&mut state, BackendOp::Close { session: session.id });
        s.values
            .into_iter()
            .enumerate()
            .map(|(group_index, values)| CounterSample {
                group_index,
                values,
            })
            .collect()
    }
}
