//! Address to function-name resolution.
//!
//! Symbols come either from an executable's ELF symbol table or from a text
//! map file with one `<hex-start> <hex-size> <name>` line per function.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use object::{Object, ObjectSymbol, SymbolKind};
use thiserror::Error;

/// Extent given to a trailing zero-size symbol.
pub const TRAILING_ZERO_SIZE_EXTENT: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub start: u64,
    pub size: u64,
    pub name: String,
}

#[derive(Debug, Error)]
pub enum SymbolError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("symbols {first:?} at {first_start:#x} and {second:?} at {second_start:#x} overlap")]
    Overlap {
        first: String,
        first_start: u64,
        second: String,
        second_start: u64,
    },
    #[error("not a readable object file: {0}")]
    Object(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LookupError {
    #[error("no symbol named {0:?}")]
    NotFound(String),
    #[error("symbol name {name:?} is ambiguous: {}", fmt_addresses(.addresses))]
    AmbiguousName { name: String, addresses: Vec<u64> },
}

fn fmt_addresses(addresses: &[u64]) -> String {
    addresses
        .iter()
        .map(|a| format!("{a:#x}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Function symbols sorted by start address, non-overlapping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolMap {
    entries: Vec<Symbol>,
    /// Exclusive end of each entry, zero-size entries already extended.
    ends: Vec<u64>,
    /// Every name, including aliases collapsed onto one entry, to its start
    /// addresses.
    names: HashMap<String, Vec<u64>>,
}

impl SymbolMap {
    /// Builds a map from arbitrary-order symbols, failing on overlap or on two
    /// symbols sharing a start address.
    pub fn from_symbols(mut symbols: Vec<Symbol>) -> Result<Self, SymbolError> {
        symbols.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.name.cmp(&b.name)));
        for pair in symbols.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.start == b.start || (a.size != 0 && a.start.saturating_add(a.size) > b.start) {
                return Err(SymbolError::Overlap {
                    first: a.name.clone(),
                    first_start: a.start,
                    second: b.name.clone(),
                    second_start: b.start,
                });
            }
        }
        Ok(Self::build(symbols, Vec::new()))
    }

    fn build(entries: Vec<Symbol>, aliases: Vec<(String, u64)>) -> Self {
        let ends = entries
            .iter()
            .enumerate()
            .map(|(i, s)| match (s.size, entries.get(i + 1)) {
                (0, Some(next)) => next.start,
                (0, None) => s.start.saturating_add(TRAILING_ZERO_SIZE_EXTENT),
                (size, _) => s.start.saturating_add(size),
            })
            .collect();
        let mut names: HashMap<String, Vec<u64>> = HashMap::new();
        for s in &entries {
            names.entry(s.name.clone()).or_default().push(s.start);
        }
        for (name, start) in aliases {
            let starts = names.entry(name).or_default();
            if !starts.contains(&start) {
                starts.push(start);
            }
        }
        Self {
            entries,
            ends,
            names,
        }
    }

    pub fn entries(&self) -> &[Symbol] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses the text map format. Blank lines are skipped; the name is the
    /// rest of the line after the size, so it may contain spaces.
    pub fn parse_map_text(text: &str) -> Result<Self, SymbolError> {
        let mut symbols = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: &str| SymbolError::MalformedLine {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let (start, rest) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| malformed("expected `<hex-start> <hex-size> <name>`"))?;
            let (size, name) = rest
                .trim_start()
                .split_once(char::is_whitespace)
                .ok_or_else(|| malformed("expected `<hex-start> <hex-size> <name>`"))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(malformed("empty symbol name"));
            }
            let start = parse_hex(start).ok_or_else(|| malformed("bad hexadecimal start"))?;
            let size = parse_hex(size).ok_or_else(|| malformed("bad hexadecimal size"))?;
            symbols.push(Symbol {
                start,
                size,
                name: name.to_string(),
            });
        }
        Self::from_symbols(symbols)
    }

    /// Reads function symbols from an ELF image, falling back to the dynamic
    /// symbol table when the static one is stripped.
    ///
    /// Aliases (several names at one address) collapse onto one entry that
    /// keeps a global name where there is one; all names stay available to
    /// [`lookup_by_name`](Self::lookup_by_name). A symbol that runs into the
    /// next one is truncated at the next start.
    pub fn from_elf_bytes(data: &[u8]) -> Result<Self, SymbolError> {
        let file = object::File::parse(data).map_err(|e| SymbolError::Object(e.to_string()))?;
        let mut raw: Vec<(Symbol, bool)> = collect_functions(file.symbols());
        if raw.is_empty() {
            raw = collect_functions(file.dynamic_symbols());
        }
        // Globals first within one address, then by name, so the kept entry is
        // deterministic.
        raw.sort_by(|(a, ga), (b, gb)| {
            a.start
                .cmp(&b.start)
                .then(gb.cmp(ga))
                .then_with(|| a.name.cmp(&b.name))
        });
        let mut entries: Vec<Symbol> = Vec::with_capacity(raw.len());
        let mut aliases = Vec::new();
        for (sym, _) in raw {
            match entries.last_mut() {
                Some(last) if last.start == sym.start => {
                    last.size = last.size.max(sym.size);
                    aliases.push((sym.name, sym.start));
                }
                _ => entries.push(sym),
            }
        }
        for i in 1..entries.len() {
            let next = entries[i].start;
            let prev = &mut entries[i - 1];
            if prev.size != 0 && prev.start.saturating_add(prev.size) > next {
                prev.size = next - prev.start;
            }
        }
        Ok(Self::build(entries, aliases))
    }

    /// Loads an ELF executable or a text map file, chosen by content.
    pub fn load(path: &Path) -> Result<Self, SymbolError> {
        let data = std::fs::read(path).map_err(|source| SymbolError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if data.starts_with(b"\x7fELF") {
            Self::from_elf_bytes(&data)
        } else {
            let text = std::str::from_utf8(&data).map_err(|e| SymbolError::MalformedLine {
                line: 0,
                reason: format!("map file is not UTF-8: {e}"),
            })?;
            Self::parse_map_text(text)
        }
    }

    /// Shifts every address by `bias` (wrapping), e.g. the load bias of a
    /// position-independent executable.
    pub fn relocated(&self, bias: u64) -> Self {
        if bias == 0 {
            return self.clone();
        }
        let entries = self
            .entries
            .iter()
            .map(|s| Symbol {
                start: s.start.wrapping_add(bias),
                ..s.clone()
            })
            .collect();
        let aliases = self
            .names
            .iter()
            .flat_map(|(n, starts)| starts.iter().map(move |s| (n.clone(), s.wrapping_add(bias))))
            .collect();
        Self::build(entries, aliases)
    }

    /// The entry whose extent contains `address`.
    pub fn find(&self, address: u64) -> Option<&Symbol> {
        let idx = self.entries.partition_point(|s| s.start <= address);
        let idx = idx.checked_sub(1)?;
        // A symbol's own start always resolves, even where its end saturates.
        (address < self.ends[idx] || address == self.entries[idx].start).then(|| &self.entries[idx])
    }

    /// Name of the function containing `address`, or the address as `0x…`.
    pub fn resolve(&self, address: u64) -> Cow<'_, str> {
        match self.find(address) {
            Some(s) => Cow::Borrowed(s.name.as_str()),
            None => Cow::Owned(format!("{address:#x}")),
        }
    }

    pub fn lookup_by_name(&self, name: &str) -> Result<u64, LookupError> {
        match self.names.get(name).map(Vec::as_slice) {
            None | Some([]) => Err(LookupError::NotFound(name.to_string())),
            Some([address]) => Ok(*address),
            Some(addresses) => {
                let mut addresses = addresses.to_vec();
                addresses.sort_unstable();
                Err(LookupError::AmbiguousName {
                    name: name.to_string(),
                    addresses,
                })
            }
        }
    }

    /// Renders the map in the text format accepted by
    /// [`parse_map_text`](Self::parse_map_text).
    pub fn to_map_text(&self) -> String {
        self.entries
            .iter()
            .map(|s| format!("{:016x} {:016x} {}\n", s.start, s.size, s.name))
            .collect()
    }
}

fn parse_hex(token: &str) -> Option<u64> {
    let digits = token
        .strip_prefix("0x")
        .or_else(|| token.strip_prefix("0X"))
        .unwrap_or(token);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

fn collect_functions<'data, I, S>(symbols: I) -> Vec<(Symbol, bool)>
where
    I: Iterator<Item = S>,
    S: ObjectSymbol<'data>,
{
    symbols
        .filter(|s| s.kind() == SymbolKind::Text && s.is_definition() && s.address() != 0)
        .filter_map(|s| {
            let name = s.name().ok()?;
            if name.is_empty() {
                return None;
            }
            Some((
                Symbol {
                    start: s.address(),
                    size: s.size(),
                    name: name.to_string(),
                },
                s.is_global(),
            ))
        })
        .collect()
}

/// Load bias of the main executable: its runtime base minus its link-time
/// base. Zero for non-PIE executables.
#[cfg(target_os = "linux")]
pub fn executable_load_bias() -> u64 {
    unsafe extern "C" fn first_object(
        info: *mut libc::dl_phdr_info,
        _size: libc::size_t,
        data: *mut libc::c_void,
    ) -> libc::c_int {
        // SAFETY: dl_iterate_phdr passes a valid info pointer and our data
        // pointer back unchanged.
        unsafe { *(data as *mut u64) = (*info).dlpi_addr as u64 };
        1
    }
    let mut bias = 0u64;
    // SAFETY: the callback only writes through the pointer we pass in, and the
    // first object reported is the main program.
    unsafe { libc::dl_iterate_phdr(Some(first_object), (&mut bias as *mut u64).cast()) };
    bias
}
