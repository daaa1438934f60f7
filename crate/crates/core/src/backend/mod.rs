//! Counter backends.
//!
//! A backend hands out sessions. A session owns a fixed list of event groups,
//! all allocated at open time, of which at most one counts at any instant.
//! Values read from a group are totals since the session was opened.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::config::FunctionContextSpec;

#[cfg(target_os = "linux")]
pub mod perf;
pub mod sim;

#[cfg(target_os = "linux")]
pub use perf::PerfBackend;
pub use sim::{BackendOp, SimulatedBackend};

/// Counters available simultaneously on the x86 parts this tool targets.
pub const DEFAULT_GROUP_WIDTH: usize = 4;

/// One measured quantity: an event, optionally qualified by a sub-event.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Unit {
    pub event_id: String,
    pub subevent: Option<String>,
}

impl Unit {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// True when `name` is this unit's `EVENT` or `EVENT:SUBEVENT` name.
    pub fn is_named(&self, name: &str) -> bool {
        match &self.subevent {
            None => self.event_id == name,
            Some(sub) => name
                .strip_prefix(self.event_id.as_str())
                .and_then(|rest| rest.strip_prefix(':'))
                == Some(sub.as_str()),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.subevent {
            Some(sub) => write!(f, "{}:{}", self.event_id, sub),
            None => f.write_str(&self.event_id),
        }
    }
}

/// Units measured together.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventGroup {
    pub units: Vec<Unit>,
}

impl EventGroup {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit_names(&self) -> Vec<String> {
        self.units.iter().map(Unit::name).collect()
    }
}

/// Totals for one group, one value per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterSample {
    pub group_index: usize,
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub name: String,
    pub group_width: usize,
    /// Accepted event ids. Empty accepts everything.
    pub known_events: BTreeSet<String>,
    /// Also accept raw `r<hex>` event codes not listed in `known_events`.
    pub accepts_raw_codes: bool,
}

impl BackendDescriptor {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            group_width: DEFAULT_GROUP_WIDTH,
            known_events: BTreeSet::new(),
            accepts_raw_codes: false,
        }
    }

    pub fn with_group_width(mut self, width: usize) -> Self {
        assert!(width >= 1, "group width must be at least 1");
        self.group_width = width;
        self
    }

    pub fn with_known_events<I, S>(mut self, events: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.known_events = events.into_iter().map(Into::into).collect();
        self
    }

    pub fn knows(&self, event_id: &str) -> bool {
        self.known_events.is_empty()
            || self.known_events.contains(event_id)
            || (self.accepts_raw_codes && is_raw_code(event_id))
    }
}

/// `r` followed by 1..=16 hex digits, as used by perf tooling for raw PMU codes.
pub fn is_raw_code(event_id: &str) -> bool {
    event_id
        .strip_prefix('r')
        .is_some_and(|hex| !hex.is_empty() && hex.len() <= 16 && hex.bytes().all(|b| b.is_ascii_hexdigit()))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("function {function:?}: unknown event {event:?} for backend {backend}")]
    UnknownEvent {
        function: String,
        event: String,
        backend: String,
    },
    #[error(
        "function {function:?}: {units} measurement units exceed group width {width} and multiplexing is disabled"
    )]
    TooManyEventsWithoutMultiplexing {
        function: String,
        units: usize,
        width: usize,
    },
}

/// Expands `spec` into measurement units and packs them, in declaration order,
/// into groups no wider than the backend allows.
pub fn validate_events(
    backend: &BackendDescriptor,
    spec: &FunctionContextSpec,
) -> Result<Vec<EventGroup>, ValidationError> {
    let mut units = Vec::new();
    for event in &spec.events {
        if !backend.knows(&event.event_id) {
            return Err(ValidationError::UnknownEvent {
                function: spec.function_name.clone(),
                event: event.event_id.clone(),
                backend: backend.name.clone(),
            });
        }
        if event.subevents.is_empty() {
            units.push(Unit {
                event_id: event.event_id.clone(),
                subevent: None,
            });
        } else {
            units.extend(event.subevents.iter().map(|sub| Unit {
                event_id: event.event_id.clone(),
                subevent: Some(sub.clone()),
            }));
        }
    }
    let width = backend.group_width.max(1);
    if spec.multiplex_period == 0 && units.len() > width {
        return Err(ValidationError::TooManyEventsWithoutMultiplexing {
            function: spec.function_name.clone(),
            units: units.len(),
            width,
        });
    }
    Ok(units
        .chunks(width)
        .map(|chunk| EventGroup {
            units: chunk.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("cannot start group {requested}: group {active} is already counting")]
    AlreadyActive { requested: usize, active: usize },
    #[error("cannot stop group {0}: it is not counting")]
    NotActive(usize),
    #[error("no group {index} (session has {count})")]
    NoSuchGroup { index: usize, count: usize },
    #[error("session is closed")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("counter allocation failed: {0}")]
    Resource(String),
    #[error(transparent)]
    State(#[from] StateError),
}

/// Source of counter measurements.
pub trait CounterBackend: Send + Sync {
    type Session: Send;

    fn descriptor(&self) -> &BackendDescriptor;

    /// Allocates every group; nothing counts until [`start_group`](Self::start_group).
    fn open_session(&self, groups: &[EventGroup]) -> Result<Self::Session, BackendError>;

    fn start_group(&self, session: &mut Self::Session, group: usize) -> Result<(), BackendError>;

    fn stop_group(&self, session: &mut Self::Session, group: usize) -> Result<(), BackendError>;

    /// Totals since open. A counting group can be read without stopping it.
    fn read_group(&self, session: &Self::Session, group: usize)
        -> Result<CounterSample, BackendError>;

    /// Stops the active group, if any, and returns the final totals of every
    /// group.
    fn close_session(&self, session: Self::Session) -> Vec<CounterSample>;
}

/// Exclusive-activation bookkeeping shared by the backends.
#[derive(Debug, Clone, Default)]
pub(crate) struct Activation {
    count: usize,
    active: Option<usize>,
}

impl Activation {
    pub(crate) fn new(count: usize) -> Self {
        Self {
            count,
            active: None,
        }
    }

    pub(crate) fn active(&self) -> Option<usize> {
        self.active
    }

    pub(crate) fn check_index(&self, index: usize) -> Result<(), StateError> {
        if index < self.count {
            Ok(())
        } else {
            Err(StateError::NoSuchGroup {
                index,
                count: self.count,
            })
        }
    }

    pub(crate) fn start(&mut self, index: usize) -> Result<(), StateError> {
        self.check_index(index)?;
        if let Some(active) = self.active {
            return Err(StateError::AlreadyActive {
                requested: index,
                active,
            });
        }
        self.active = Some(index);
        Ok(())
    }

    pub(crate) fn stop(&mut self, index: usize) -> Result<(), StateError> {
        self.check_index(index)?;
        if self.active != Some(index) {
            return Err(StateError::NotActive(index));
        }
        self.active = None;
        Ok(())
    }
}
