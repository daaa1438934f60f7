//! Function-level hardware counter profiling.
//!
//! A [`ContextConfig`](config::ContextConfig) names the functions to watch and
//! the counter events for each. The [`CallbackRuntime`](runtime::CallbackRuntime)
//! is driven by compiler-inserted entry and exit hooks: it resolves the
//! function address, opens a [`CounterBackend`](backend::CounterBackend)
//! session around monitored calls, rotates event groups by call count, and
//! accumulates totals into [`ProfileReport`](report::ProfileReport)s.

pub mod backend;
pub mod config;
pub mod multiplex;
pub mod registry;
pub mod report;
pub mod runtime;
pub mod symbols;

pub use backend::{BackendDescriptor, CounterBackend, EventGroup, Unit};
pub use config::{parse_config, serialize_config, ContextConfig, EventSpec, FunctionContextSpec};
pub use multiplex::multiplex_group_index;
pub use registry::{ContextRegistry, FunctionContext, RegistryEpoch};
pub use report::{compare_reports, parse_report_csv, ProfileReport};
pub use runtime::{CallbackRuntime, RuntimeOptions};
pub use symbols::SymbolMap;
