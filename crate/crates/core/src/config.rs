//! Context configuration files.
//!
//! The format is line oriented. `//` starts a comment that runs to the end of
//! the line, blank lines are ignored and keys are case-sensitive. Blocks nest
//! as `[FUNCTION]` > `[EVENT]` > `[SUBEVENT]` and every list is preceded by a
//! declared count that must match what follows:
//!
//! ```text
//! BINARY=my_a.out
//! NO_FUNCTIONS=1
//!
//! [FUNCTION]
//! FUNC_NAME=foo
//! NO_EVENTS=1
//! MULTIPLEX_PERIOD=100    // optional, 0 disables multiplexing
//! [EVENT]
//! ID=DISPATCHED_FPU
//! NO_SUBEVENTS=2
//! [SUBEVENT]
//! ID=OPS_ADD
//! ID=OPS_MULTIPLY
//! [/SUBEVENT]
//! [/EVENT]
//! [/FUNCTION]
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

/// One hardware event and the sub-events (qualifiers) it is measured with.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventSpec {
    pub event_id: String,
    pub subevents: Vec<String>,
}

impl EventSpec {
    pub fn new(event_id: impl Into<String>) -> Self {
        Self {
            event_id: event_id.into(),
            subevents: Vec::new(),
        }
    }

    pub fn with_subevents<I, S>(event_id: impl Into<String>, subevents: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            event_id: event_id.into(),
            subevents: subevents.into_iter().map(Into::into).collect(),
        }
    }

    /// Names of the measurement units this event expands to: the bare id when
    /// there are no sub-events, otherwise one `EVENT:SUBEVENT` per sub-event.
    pub fn units(&self) -> Vec<String> {
        if self.subevents.is_empty() {
            vec![self.event_id.clone()]
        } else {
            self.subevents
                .iter()
                .map(|sub| format!("{}:{}", self.event_id, sub))
                .collect()
        }
    }
}

/// What to monitor for one function.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FunctionContextSpec {
    pub function_name: String,
    pub events: Vec<EventSpec>,
    /// Calls per event group before rotating to the next one. 0 disables
    /// multiplexing.
    pub multiplex_period: u64,
}

impl FunctionContextSpec {
    pub fn new(function_name: impl Into<String>, events: Vec<EventSpec>) -> Self {
        Self {
            function_name: function_name.into(),
            events,
            multiplex_period: 0,
        }
    }

    pub fn with_multiplex_period(mut self, period: u64) -> Self {
        self.multiplex_period = period;
        self
    }

    /// Flattened measurement units in declaration order.
    pub fn units(&self) -> Vec<String> {
        self.events.iter().flat_map(EventSpec::units).collect()
    }
}

/// A whole configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ContextConfig {
    /// Informational only; carried into reports.
    pub binary_name: String,
    pub functions: Vec<FunctionContextSpec>,
}

impl ContextConfig {
    pub fn new(binary_name: impl Into<String>, functions: Vec<FunctionContextSpec>) -> Self {
        Self {
            binary_name: binary_name.into(),
            functions,
        }
    }

    /// Checks the invariants `serialize_config` relies on.
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_ident("BINARY", &self.binary_name)?;
        let mut seen = HashSet::new();
        for f in &self.functions {
            check_ident("FUNC_NAME", &f.function_name)?;
            if !seen.insert(f.function_name.as_str()) {
                return Err(ConfigError::DuplicateFunction(f.function_name.clone()));
            }
            for e in &f.events {
                check_ident("ID", &e.event_id)?;
                for s in &e.subevents {
                    check_ident("ID", s)?;
                }
            }
        }
        Ok(())
    }
}

/// Identifier rules shared by names and event ids. Commas are excluded so the
/// values can travel through the report CSV unquoted.
fn ident_problem(value: &str) -> Option<&'static str> {
    if value.is_empty() {
        Some("empty value")
    } else if value.chars().any(char::is_whitespace) {
        Some("value contains whitespace")
    } else if value.contains(',') {
        Some("value contains ','")
    } else if value.contains("//") {
        Some("value contains '//'")
    } else {
        None
    }
}

fn check_ident(key: &str, value: &str) -> Result<(), ConfigError> {
    match ident_problem(value) {
        Some(reason) => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        }),
        None => Ok(()),
    }
}

/// Structural problems with an in-memory [`ContextConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid {key} value {value:?}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: &'static str,
    },
    #[error("duplicate function name {0:?}")]
    DuplicateFunction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Function,
    Event,
    Subevent,
}

impl Block {
    fn tag(self) -> &'static str {
        match self {
            Block::Function => "FUNCTION",
            Block::Event => "EVENT",
            Block::Subevent => "SUBEVENT",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownKey(String),
    UnknownTag(String),
    /// A closing tag that does not match the innermost open block, or an
    /// opening tag in a place it cannot appear.
    MisplacedTag(String),
    UnclosedBlock(Block),
    MalformedLine(String),
    MissingKey(&'static str),
    DuplicateKey(&'static str),
    InvalidInteger { key: &'static str, value: String },
    InvalidValue { key: &'static str, reason: &'static str },
    FunctionCountMismatch { declared: u64, actual: u64 },
    EventCountMismatch { declared: u64, actual: u64 },
    SubeventCountMismatch { declared: u64, actual: u64 },
    DuplicateFunction(String),
}

impl ParseErrorKind {
    /// Short stable description, independent of the offending values.
    pub fn reason(&self) -> &'static str {
        match self {
            ParseErrorKind::UnknownKey(_) => "unknown key",
            ParseErrorKind::UnknownTag(_) => "unknown block tag",
            ParseErrorKind::MisplacedTag(_) => "misplaced block tag",
            ParseErrorKind::UnclosedBlock(_) => "unclosed block",
            ParseErrorKind::MalformedLine(_) => "malformed line",
            ParseErrorKind::MissingKey(_) => "missing key",
            ParseErrorKind::DuplicateKey(_) => "duplicate key",
            ParseErrorKind::InvalidInteger { .. } => "non-integer count",
            ParseErrorKind::InvalidValue { .. } => "invalid value",
            ParseErrorKind::FunctionCountMismatch { .. } => "function count mismatch",
            ParseErrorKind::EventCountMismatch { .. } => "event count mismatch",
            ParseErrorKind::SubeventCountMismatch { .. } => "subevent count mismatch",
            ParseErrorKind::DuplicateFunction(_) => "duplicate function name",
        }
    }
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let reason = self.reason();
        match self {
            ParseErrorKind::UnknownKey(k) => write!(f, "{reason} {k:?}"),
            ParseErrorKind::UnknownTag(t) | ParseErrorKind::MisplacedTag(t) => {
                write!(f, "{reason} {t}")
            }
            ParseErrorKind::UnclosedBlock(b) => write!(f, "{reason} {b}"),
            ParseErrorKind::MalformedLine(l) => write!(f, "{reason} {l:?}"),
            ParseErrorKind::MissingKey(k) | ParseErrorKind::DuplicateKey(k) => {
                write!(f, "{reason} {k}")
            }
            ParseErrorKind::InvalidInteger { key, value } => {
                write!(f, "{reason}: {key}={value:?}")
            }
            ParseErrorKind::InvalidValue { key, reason: why } => write!(f, "{reason} for {key}: {why}"),
            ParseErrorKind::FunctionCountMismatch { declared, actual }
            | ParseErrorKind::EventCountMismatch { declared, actual }
            | ParseErrorKind::SubeventCountMismatch { declared, actual } => {
                write!(f, "{reason}: declared {declared}, found {actual}")
            }
            ParseErrorKind::DuplicateFunction(name) => write!(f, "{reason} {name:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}{}", .function.as_ref().map(|f| format!(" (function {f:?})")).unwrap_or_default())]
pub struct ParseError {
    /// 1-based line number; the line after the last one for end-of-input errors.
    pub line: usize,
    pub kind: ParseErrorKind,
    /// Function being parsed when the error occurred, if any.
    pub function: Option<String>,
}

impl ParseError {
    pub fn reason(&self) -> &'static str {
        self.kind.reason()
    }
}

#[derive(Default)]
struct EventBuilder {
    id: Option<String>,
    declared: Option<u64>,
    subevents: Vec<String>,
}

#[derive(Default)]
struct FunctionBuilder {
    name: Option<String>,
    declared: Option<u64>,
    period: Option<u64>,
    events: Vec<EventSpec>,
}

struct Parser {
    binary: Option<String>,
    declared_functions: Option<u64>,
    functions: Vec<FunctionContextSpec>,
    names: HashSet<String>,
    function: Option<FunctionBuilder>,
    event: Option<EventBuilder>,
    in_subevent: bool,
    line: usize,
}

fn set_once<T>(slot: &mut Option<T>, key: &'static str, value: T) -> Result<(), ParseErrorKind> {
    if slot.is_some() {
        return Err(ParseErrorKind::DuplicateKey(key));
    }
    *slot = Some(value);
    Ok(())
}

/// Parses a configuration file.
pub fn parse_config(text: &str) -> Result<ContextConfig, ParseError> {
    let mut p = Parser {
        binary: None,
        declared_functions: None,
        functions: Vec::new(),
        names: HashSet::new(),
        function: None,
        event: None,
        in_subevent: false,
        line: 0,
    };
    for (idx, raw) in text.lines().enumerate() {
        p.line = idx + 1;
        let content = match raw.find("//") {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        p.line_content(content)?;
    }
    p.line = text.lines().count() + 1;
    p.finish()
}

impl Parser {
    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: self.line,
            kind,
            function: self
                .function
                .as_ref()
                .and_then(|f| f.name.clone()),
        }
    }

    fn innermost(&self) -> Option<Block> {
        if self.in_subevent {
            Some(Block::Subevent)
        } else if self.event.is_some() {
            Some(Block::Event)
        } else if self.function.is_some() {
            Some(Block::Function)
        } else {
            None
        }
    }

    fn line_content(&mut self, content: &str) -> Result<(), ParseError> {
        if let Some(tag) = content.strip_prefix('[') {
            let Some(tag) = tag.strip_suffix(']') else {
                return Err(self.err(ParseErrorKind::MalformedLine(content.to_string())));
            };
            return self.tag(tag.trim());
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(self.err(ParseErrorKind::MalformedLine(content.to_string())));
        };
        self.key_value(key.trim(), value.trim())
    }

    fn tag(&mut self, tag: &str) -> Result<(), ParseError> {
        let (closing, name) = match tag.strip_prefix('/') {
            Some(name) => (true, name.trim()),
            None => (false, tag),
        };
        let block = match name {
            "FUNCTION" => Block::Function,
            "EVENT" => Block::Event,
            "SUBEVENT" => Block::Subevent,
            _ => return Err(self.err(ParseErrorKind::UnknownTag(format!("[{tag}]")))),
        };
        let inner = self.innermost();
        if closing {
            if inner != Some(block) {
                return Err(self.err(ParseErrorKind::MisplacedTag(format!("[/{}]", block.tag()))));
            }
            return match block {
                Block::Subevent => {
                    self.in_subevent = false;
                    Ok(())
                }
                Block::Event => self.close_event(),
                Block::Function => self.close_function(),
            };
        }
        let parent = match block {
            Block::Function => None,
            Block::Event => Some(Block::Function),
            Block::Subevent => Some(Block::Event),
        };
        if inner != parent {
            return Err(self.err(ParseErrorKind::MisplacedTag(block.to_string())));
        }
        match block {
            Block::Function => self.function = Some(FunctionBuilder::default()),
            Block::Event => self.event = Some(EventBuilder::default()),
            Block::Subevent => self.in_subevent = true,
        }
        Ok(())
    }

    fn ident(&self, key: &'static str, value: &str) -> Result<String, ParseError> {
        match ident_problem(value) {
            Some(reason) => Err(self.err(ParseErrorKind::InvalidValue { key, reason })),
            None => Ok(value.to_string()),
        }
    }

    fn count(&self, key: &'static str, value: &str) -> Result<u64, ParseError> {
        // u64::from_str accepts a leading '+', which is not a count.
        if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.err(ParseErrorKind::InvalidInteger {
                key,
                value: value.to_string(),
            }));
        }
        value.parse().map_err(|_| {
            self.err(ParseErrorKind::InvalidInteger {
                key,
                value: value.to_string(),
            })
        })
    }

    fn key_value(&mut self, key: &str, value: &str) -> Result<(), ParseError> {
        let r = match (self.innermost(), key) {
            (None, "BINARY") => {
                let v = self.ident("BINARY", value)?;
                set_once(&mut self.binary, "BINARY", v)
            }
            (None, "NO_FUNCTIONS") => {
                let n = self.count("NO_FUNCTIONS", value)?;
                set_once(&mut self.declared_functions, "NO_FUNCTIONS", n)
            }
            (Some(Block::Function), "FUNC_NAME") => {
                let v = self.ident("FUNC_NAME", value)?;
                set_once(&mut self.open_function().name, "FUNC_NAME", v)
            }
            (Some(Block::Function), "NO_EVENTS") => {
                let n = self.count("NO_EVENTS", value)?;
                set_once(&mut self.open_function().declared, "NO_EVENTS", n)
            }
            (Some(Block::Function), "MULTIPLEX_PERIOD") => {
                let n = self.count("MULTIPLEX_PERIOD", value)?;
                set_once(&mut self.open_function().period, "MULTIPLEX_PERIOD", n)
            }
            (Some(Block::Event), "ID") => {
                let v = self.ident("ID", value)?;
                set_once(&mut self.open_event().id, "ID", v)
            }
            (Some(Block::Event), "NO_SUBEVENTS") => {
                let n = self.count("NO_SUBEVENTS", value)?;
                set_once(&mut self.open_event().declared, "NO_SUBEVENTS", n)
            }
            (Some(Block::Subevent), "ID") => {
                let v = self.ident("ID", value)?;
                self.open_event().subevents.push(v);
                Ok(())
            }
            _ => Err(ParseErrorKind::UnknownKey(key.to_string())),
        };
        r.map_err(|kind| self.err(kind))
    }

    fn open_function(&mut self) -> &mut FunctionBuilder {
        self.function.as_mut().expect("function block open")
    }

    fn open_event(&mut self) -> &mut EventBuilder {
        self.event.as_mut().expect("event block open")
    }

    fn close_event(&mut self) -> Result<(), ParseError> {
        let e = self.event.take().expect("event block open");
        let Some(id) = e.id else {
            return Err(self.err(ParseErrorKind::MissingKey("ID")));
        };
        let Some(declared) = e.declared else {
            return Err(self.err(ParseErrorKind::MissingKey("NO_SUBEVENTS")));
        };
        let actual = e.subevents.len() as u64;
        if declared != actual {
            return Err(self.err(ParseErrorKind::SubeventCountMismatch { declared, actual }));
        }
        self.open_function().events.push(EventSpec {
                event_id: id,
                subevents: e.subevents,
            });
        Ok(())
    }

    fn close_function(&mut self) -> Result<(), ParseError> {
        let Some(name) = self.function.as_ref().and_then(|f| f.name.clone()) else {
            return Err(self.err(ParseErrorKind::MissingKey("FUNC_NAME")));
        };
        let f = self.function.as_ref().expect("function block open");
        let Some(declared) = f.declared else {
            return Err(self.err(ParseErrorKind::MissingKey("NO_EVENTS")));
        };
        let actual = f.events.len() as u64;
        if declared != actual {
            return Err(self.err(ParseErrorKind::EventCountMismatch { declared, actual }));
        }
        if self.names.contains(&name) {
            return Err(self.err(ParseErrorKind::DuplicateFunction(name)));
        }
        let f = self.function.take().expect("function block open");
        self.names.insert(name.clone());
        self.functions.push(FunctionContextSpec {
            function_name: name,
            events: f.events,
            multiplex_period: f.period.unwrap_or(0),
        });
        Ok(())
    }

    fn finish(mut self) -> Result<ContextConfig, ParseError> {
        if let Some(block) = self.innermost() {
            return Err(self.err(ParseErrorKind::UnclosedBlock(block)));
        }
        let Some(binary_name) = self.binary.take() else {
            return Err(self.err(ParseErrorKind::MissingKey("BINARY")));
        };
        let Some(declared) = self.declared_functions else {
            return Err(self.err(ParseErrorKind::MissingKey("NO_FUNCTIONS")));
        };
        let actual = self.functions.len() as u64;
        if declared != actual {
            return Err(self.err(ParseErrorKind::FunctionCountMismatch { declared, actual }));
        }
        Ok(ContextConfig {
            binary_name,
            functions: self.functions,
        })
    }
}

/// Renders `cfg` in the configuration file layout.
///
/// `cfg` is expected to satisfy [`ContextConfig::validate`]; the output then
/// parses back to an equal value.
pub fn serialize_config(cfg: &ContextConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "BINARY={}", cfg.binary_name);
    let _ = writeln!(out, "NO_FUNCTIONS={}", cfg.functions.len());
    for f in &cfg.functions {
        let _ = writeln!(out, "\n[FUNCTION]");
        let _ = writeln!(out, "FUNC_NAME={}", f.function_name);
        let _ = writeln!(out, "NO_EVENTS={}", f.events.len());
        if f.multiplex_period != 0 {
            let _ = writeln!(out, "MULTIPLEX_PERIOD={}", f.multiplex_period);
        }
        for e in &f.events {
            let _ = writeln!(out, "\n[EVENT]");
            let _ = writeln!(out, "ID={}", e.event_id);
            let _ = writeln!(out, "NO_SUBEVENTS={}", e.subevents.len());
            if !e.subevents.is_empty() {
                out.push_str("[SUBEVENT]\n");
                for s in &e.subevents {
                    let _ = writeln!(out, "ID={s}");
                }
                out.push_str("[/SUBEVENT]\n");
            }
            out.push_str("[/EVENT]\n");
        }
        out.push_str("\n[/FUNCTION]\n");
    }
    out
}
