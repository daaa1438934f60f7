//! Profile reports: accumulation results, their text and CSV renderings, and
//! the ratio comparison used to contrast runs.
//!
//! A report emission is a human-readable table (every line starts with `# `)
//! followed by the machine-readable block:
//!
//! ```text
//! function,epoch,group,event,value,calls
//! #@report binary=my_a.out epoch=0 pid=4242 rank=
//! #@function name=foo calls=1000
//! foo,0,0,DATA_CACHE_MISSES,5311,1000
//! ```
//!
//! `#@` lines carry what the six columns cannot (binary, process, total call
//! counts). CSV readers that skip `#` comments see only the header and rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const CSV_HEADER: &str = "function,epoch,group,event,value,calls";

/// Environment variables consulted, in order, for an MPI-style rank.
pub const RANK_ENV_VARS: &[&str] = &["OMPI_COMM_WORLD_RANK", "PMI_RANK", "PMIX_RANK", "SLURM_PROCID"];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupReport {
    /// Measurement unit names.
    pub events: Vec<String>,
    pub values: Vec<u64>,
    /// Calls attributed to this group.
    pub calls: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FunctionReport {
    pub function_name: String,
    pub call_count: u64,
    pub groups: Vec<GroupReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ProfileReport {
    pub binary_name: String,
    pub epoch_id: u64,
    pub process_id: u32,
    pub rank_tag: Option<String>,
    /// Sorted by function name.
    pub entries: Vec<FunctionReport>,
}

impl ProfileReport {
    pub fn sort_entries(&mut self) {
        self.entries
            .sort_by(|a, b| a.function_name.cmp(&b.function_name));
    }

    pub fn entry(&self, function: &str) -> Option<&FunctionReport> {
        self.entries.iter().find(|e| e.function_name == function)
    }
}

/// First rank variable set in the environment.
pub fn rank_from_env() -> Option<String> {
    RANK_ENV_VARS
        .iter()
        .find_map(|var| std::env::var(var).ok())
        .map(|r| r.trim().to_string())
        .filter(|r| !r.is_empty() && !r.contains(char::is_whitespace))
}

/// Human-readable table, every line prefixed with `# `.
pub fn render_table(report: &ProfileReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# profile: binary={} epoch={} pid={}{}",
        report.binary_name,
        report.epoch_id,
        report.process_id,
        report
            .rank_tag
            .as_deref()
            .map(|r| format!(" rank={r}"))
            .unwrap_or_default()
    );
    let name_w = report
        .entries
        .iter()
        .map(|e| e.function_name.len())
        .chain(std::iter::once("function".len()))
        .max()
        .unwrap_or(8);
    let event_w = report
        .entries
        .iter()
        .flat_map(|e| e.groups.iter().flat_map(|g| g.events.iter().map(String::len)))
        .chain(std::iter::once("event".len()))
        .max()
        .unwrap_or(5);
    let _ = writeln!(
        out,
        "# {:<name_w$}  {:>12}  {:>5}  {:<event_w$}  {:>20}  {:>12}",
        "function", "calls", "group", "event", "value", "group calls"
    );
    for e in &report.entries {
        if e.groups.is_empty() {
            let _ = writeln!(out, "# {:<name_w$}  {:>12}", e.function_name, e.call_count);
        }
        for (gi, g) in e.groups.iter().enumerate() {
            for (event, value) in g.events.iter().zip(&g.values) {
                let _ = writeln!(
                    out,
                    "# {:<name_w$}  {:>12}  {:>5}  {:<event_w$}  {:>20}  {:>12}",
                    e.function_name, e.call_count, gi, event, value, g.calls
                );
            }
        }
    }
    out
}

/// Machine-readable block: header, `#@` metadata, one row per function,
/// group and unit.
pub fn render_csv(report: &ProfileReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "#@report binary={} epoch={} pid={} rank={}",
        report.binary_name,
        report.epoch_id,
        report.process_id,
        report.rank_tag.as_deref().unwrap_or("")
    );
    for e in &report.entries {
        let _ = writeln!(out, "#@function name={} calls={}", e.function_name, e.call_count);
    }
    for e in &report.entries {
        for (gi, g) in e.groups.iter().enumerate() {
            for (event, value) in g.events.iter().zip(&g.values) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    e.function_name, report.epoch_id, gi, event, value, g.calls
                );
            }
        }
    }
    out
}

/// Writes the table and the CSV block.
pub fn write_report(report: &ProfileReport, out: &mut dyn Write) -> io::Result<()> {
    if !report.entries.is_empty() {
        out.write_all(render_table(report).as_bytes())?;
    }
    out.write_all(render_csv(report).as_bytes())?;
    out.flush()
}

/// Where the runtime sends reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportDestination {
    Stdout,
    File(PathBuf),
}

impl ReportDestination {
    /// `base` suffixed with `.pid<PID>` and, when a rank is known,
    /// `.rank<R>`, so concurrent processes never share a file.
    pub fn per_process(base: &Path, pid: u32, rank: Option<&str>) -> Self {
        let mut name = base.as_os_str().to_owned();
        name.push(format!(".pid{pid}"));
        if let Some(rank) = rank {
            name.push(format!(".rank{rank}"));
        }
        ReportDestination::File(PathBuf::from(name))
    }

    /// Appends `report`; partial reports from reloads accumulate in order.
    pub fn emit(&self, report: &ProfileReport) -> io::Result<()> {
        match self {
            ReportDestination::Stdout => write_report(report, &mut io::stdout().lock()),
            ReportDestination::File(path) => {
                let mut file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                write_report(report, &mut file)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("missing `{CSV_HEADER}` header")]
    MissingHeader,
    #[error("line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
}

#[derive(Default)]
struct Meta {
    binary: String,
    pid: u32,
    rank: Option<String>,
    calls: BTreeMap<String, u64>,
}

/// Parses every report block in `text`, grouped by epoch. Lines before the
/// first header and `#` comments are ignored; `#@` metadata is applied when
/// present, otherwise call totals are the sum of group calls.
pub fn parse_report_csv(text: &str) -> Result<Vec<ProfileReport>, SchemaError> {
    let mut seen_header = false;
    let mut current_epoch: Option<u64> = None;
    let mut meta: BTreeMap<u64, Meta> = BTreeMap::new();
    // epoch -> function -> group -> report
    let mut rows: BTreeMap<u64, BTreeMap<String, BTreeMap<usize, GroupReport>>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        let bad = |reason: String| SchemaError::BadRecord { line: lineno, reason };
        if line == CSV_HEADER {
            seen_header = true;
            current_epoch = None;
            continue;
        }
        if !seen_header || line.is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix("#@") {
            let mut words = directive.split_whitespace();
            let kind = words.next().unwrap_or_default();
            let fields: BTreeMap<&str, &str> = words.filter_map(|w| w.split_once('=')).collect();
            match kind {
                "report" => {
                    let epoch = fields
                        .get("epoch")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("report metadata without epoch".into()))?;
                    let m = meta.entry(epoch).or_default();
                    m.binary = fields.get("binary").unwrap_or(&"").to_string();
                    m.pid = fields.get("pid").and_then(|v| v.parse().ok()).unwrap_or(0);
                    m.rank = fields
                        .get("rank")
                        .filter(|r| !r.is_empty())
                        .map(|r| r.to_string());
                    rows.entry(epoch).or_default();
                    current_epoch = Some(epoch);
                }
                "function" => {
                    let epoch = current_epoch
                        .ok_or_else(|| bad("function metadata before report metadata".into()))?;
                    let name = fields
                        .get("name")
                        .filter(|n| !n.is_empty())
                        .ok_or_else(|| bad("function metadata without name".into()))?;
                    let calls = fields
                        .get("calls")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad("function metadata without calls".into()))?;
                    meta.entry(epoch).or_default().calls.insert(name.to_string(), calls);
                    rows.entry(epoch).or_default().entry(name.to_string()).or_default();
                }
                _ => {}
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [function, epoch, group, event, value, calls] = fields[..] else {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        };
        if function.is_empty() || event.is_empty() {
            return Err(bad("empty function or event".into()));
        }
        let int = |name: &str, v: &str| -> Result<u64, SchemaError> {
            if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
                return Err(bad(format!("{name} is not a non-negative integer: {v:?}")));
            }
            v.parse().map_err(|_| bad(format!("{name} out of range: {v:?}")))
        };
        let epoch = int("epoch", epoch)?;
        let group = usize::try_from(int("group", group)?).map_err(|_| bad("group out of range".into()))?;
        let value = int("value", value)?;
        let calls = int("calls", calls)?;
        let g = rows
            .entry(epoch)
            .or_default()
            .entry(function.to_string())
            .or_default()
            .entry(group)
            .or_default();
        if !g.events.is_empty() && g.calls != calls {
            return Err(bad(format!(
                "inconsistent calls for {function} group {group}: {} vs {calls}",
                g.calls
            )));
        }
        g.calls = calls;
        g.events.push(event.to_string());
        g.values.push(value);
    }
    if !seen_header {
        return Err(SchemaError::MissingHeader);
    }

    Ok(rows
        .into_iter()
        .map(|(epoch_id, functions)| {
            let m = meta.remove(&epoch_id).unwrap_or_default();
            let entries = functions
                .into_iter()
                .map(|(function_name, groups)| {
                    let max = groups.keys().next_back().map_or(0, |g| g + 1);
                    let mut dense = vec![GroupReport::default(); max];
                    for (gi, g) in groups {
                        dense[gi] = g;
                    }
                    let call_count = m
                        .calls
                        .get(&function_name)
                        .copied()
                        .unwrap_or_else(|| dense.iter().map(|g| g.calls).sum());
                    FunctionReport {
                        function_name,
                        call_count,
                        groups: dense,
                    }
                })
                .collect();
            ProfileReport {
                binary_name: m.binary,
                epoch_id,
                process_id: m.pid,
                rank_tag: m.rank,
                entries,
            }
        })
        .collect())
}

/// Per-unit figures normalised by the calls that were measured.
#[derive(Debug, Clone, PartialEq)]
pub struct EventEstimate {
    pub event: String,
    pub group: usize,
    pub value: u64,
    pub calls_in_group: u64,
    pub per_call: f64,
    /// `per_call` scaled to every call of the function.
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiplexAverage {
    pub estimates: Vec<EventEstimate>,
    /// Groups left out because no call was measured in them.
    pub omitted_groups: Vec<usize>,
}

/// Extrapolates each group's totals to the whole run, making multiplexed
/// and exhaustive measurements comparable.
pub fn average_multiplexed(entry: &FunctionReport) -> MultiplexAverage {
    let mut out = MultiplexAverage::default();
    for (gi, g) in entry.groups.iter().enumerate() {
        if g.calls == 0 {
            out.omitted_groups.push(gi);
            continue;
        }
        for (event, &value) in g.events.iter().zip(&g.values) {
            let per_call = value as f64 / g.calls as f64;
            // Exact when the group saw every call.
            let estimate = if g.calls == entry.call_count {
                value as f64
            } else {
                per_call * entry.call_count as f64
            };
            out.estimates.push(EventEstimate {
                event: event.clone(),
                group: gi,
                value,
                calls_in_group: g.calls,
                per_call,
                estimate,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Raw counter totals.
    #[default]
    Raw,
    /// Extrapolated whole-run estimates from [`average_multiplexed`].
    Estimated,
}

/// Per-event totals over every function and epoch, in first-seen order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventTotals {
    pub label: String,
    pub totals: Vec<(String, f64)>,
}

impl EventTotals {
    pub fn from_reports(label: impl Into<String>, reports: &[ProfileReport], how: Aggregation) -> Self {
        let mut totals: Vec<(String, f64)> = Vec::new();
        let mut add = |event: &str, v: f64| match totals.iter_mut().find(|(e, _)| e == event) {
            Some((_, t)) => *t += v,
            None => totals.push((event.to_string(), v)),
        };
        for r in reports {
            for e in &r.entries {
                match how {
                    Aggregation::Raw => {
                        for g in &e.groups {
                            for (event, &value) in g.events.iter().zip(&g.values) {
                                add(event, value as f64);
                            }
                        }
                    }
                    Aggregation::Estimated => {
                        for est in average_multiplexed(e).estimates {
                            add(&est.event, est.estimate);
                        }
                    }
                }
            }
        }
        Self {
            label: label.into(),
            totals,
        }
    }

    pub fn get(&self, event: &str) -> Option<f64> {
        self.totals.iter().find(|(e, _)| e == event).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioCell {
    pub value: Option<f64>,
    /// `candidate / baseline`; `None` when undefined (zero baseline or the
    /// event is missing from the candidate).
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub event: String,
    pub baseline: f64,
    pub cells: Vec<RatioCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    pub baseline_label: String,
    pub candidate_labels: Vec<String>,
    pub rows: Vec<RatioRow>,
}

impl RatioTable {
    pub fn ratio(&self, event: &str, candidate: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.event == event)
            .and_then(|r| r.cells.get(candidate))
            .and_then(|c| c.ratio)
    }

    pub fn row(&self, event: &str) -> Option<&RatioRow> {
        self.rows.iter().find(|r| r.event == event)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("no event with a nonzero baseline value is shared by every input")]
    NoCommonEvents,
}

/// Ratios of each candidate to the baseline, event by event. Events that are
/// zero in every input are dropped.
pub fn compare_reports(
    baseline: &EventTotals,
    candidates: &[EventTotals],
) -> Result<RatioTable, CompareError> {
    let mut rows = Vec::new();
    let mut usable = false;
    for (event, base) in &baseline.totals {
        let cells: Vec<RatioCell> = candidates
            .iter()
            .map(|c| {
                let value = c.get(event);
                let ratio = match value {
                    Some(v) if *base != 0.0 => Some(v / base),
                    _ => None,
                };
                RatioCell { value, ratio }
            })
            .collect();
        let all_zero = *base == 0.0 && cells.iter().all(|c| c.value.unwrap_or(0.0) == 0.0);
        if all_zero {
            continue;
        }
        if *base != 0.0 && cells.iter().all(|c| c.value.is_some()) {
            usable = true;
        }
        rows.push(RatioRow {
            event: event.clone(),
            baseline: *base,
            cells,
        });
    }
    if !usable {
        return Err(CompareError::NoCommonEvents);
    }
    Ok(RatioTable {
        baseline_label: baseline.label.clone(),
        candidate_labels: candidates.iter().map(|c| c.label.clone()).collect(),
        rows,
    })
}

/// `x` with `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.*}", digits.saturating_sub(1), x);
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Renders the ratio table with a percent-difference column per candidate.
pub fn render_ratio_table(table: &RatioTable) -> String {
    let event_w = table
        .rows
        .iter()
        .map(|r| r.event.len())
        .chain(std::iter::once("event".len()))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = write!(out, "{:<event_w$}  {:>12}", "event", table.baseline_label);
    for label in &table.candidate_labels {
        let _ = write!(out, "  {:>12}  {:>8}  {:>9}", label, "ratio", "diff");
    }
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "{:<event_w$}  {:>12.3e}", r.event, r.baseline);
        for c in &r.cells {
            let value = c.value.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
            let (ratio, diff) = match c.ratio {
                Some(q) => (
                    format_significant(q, 4),
                    format!("{:+.1}%", (q - 1.0) * 100.0),
                ),
                None => ("n/a".to_string(), "n/a".to_string()),
            };
            let _ = write!(out, "  {value:>12}  {ratio:>8}  {diff:>9}");
        }
        out.push('\n');
    }
    out
}
