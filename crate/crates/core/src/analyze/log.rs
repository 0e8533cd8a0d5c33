//! Logcat-style log lines: `<epoch-ms> <pid> <tid> <severity> <tag>: <message>`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    V,
    D,
    I,
    W,
    E,
    A,
    F,
}

impl Severity {
    pub fn as_char(self) -> char {
        match self {
            Severity::V => 'V',
            Severity::D => 'D',
            Severity::I => 'I',
            Severity::W => 'W',
            Severity::E => 'E',
            Severity::A => 'A',
            Severity::F => 'F',
        }
    }

    pub fn is_fatal(self) -> bool {
        matches!(self, Severity::A | Severity::F)
    }
}

impl FromStr for Severity {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "V" => Severity::V,
            "D" => Severity::D,
            "I" => Severity::I,
            "W" => Severity::W,
            "E" => Severity::E,
            "A" => Severity::A,
            "F" => Severity::F,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub timestamp_ms: u64,
    pub pid: u32,
    pub tid: u32,
    pub severity: Severity,
    pub tag: String,
    pub message: String,
}

impl LogLine {
    /// Whether the line would survive a render/parse round trip.
    pub fn is_well_formed(&self) -> bool {
        !self.tag.is_empty()
            && !self.tag.contains([' ', ':', '\t', '\r', '\n'])
            && !self.message.contains(['\r', '\n'])
    }
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}: {}",
            self.timestamp_ms,
            self.pid,
            self.tid,
            self.severity.as_char(),
            self.tag,
            self.message
        )
    }
}

/// Parses one line without its terminator.
pub fn parse_line(line: &str) -> Option<LogLine> {
    let mut parts = line.splitn(5, ' ');
    let timestamp_ms = parts.next()?.parse().ok()?;
    let pid = parts.next()?.parse().ok()?;
    let tid = parts.next()?.parse().ok()?;
    let severity = parts.next()?.parse().ok()?;
    let rest = parts.next()?;
    let (tag, message) = rest.split_once(':')?;
    if tag.is_empty() || tag.contains([' ', '\t']) {
        return None;
    }
    let message = match message.strip_prefix(' ') {
        Some(m) => m,
        None if message.is_empty() => "",
        None => return None,
    };
    Some(LogLine {
        timestamp_ms,
        pid,
        tid,
        severity,
        tag: tag.to_string(),
        message: message.to_string(),
    })
}

/// A collected line; lines that do not fit the grammar are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogEntry {
    Parsed(LogLine),
    Unparsed(String),
}

impl LogEntry {
    pub fn line(&self) -> Option<&LogLine> {
        match self {
            LogEntry::Parsed(l) => Some(l),
            LogEntry::Unparsed(_) => None,
        }
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEntry::Parsed(l) => l.fmt(f),
            LogEntry::Unparsed(raw) => f.write_str(raw),
        }
    }
}

/// One entry per input line, in order.
pub fn parse_log(text: &str) -> Vec<LogEntry> {
    text.lines()
        .map(|l| {
            let l = l.strip_suffix('\r').unwrap_or(l);
            match parse_line(l) {
                Some(line) => LogEntry::Parsed(line),
                None => LogEntry::Unparsed(l.to_string()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_crash_line() {
        let l = parse_line("1700000000123 812 830 E AndroidRuntime: FATAL EXCEPTION: main").unwrap();
        assert_eq!(l.pid, 812);
        assert_eq!(l.severity, Severity::E);
        assert_eq!(l.tag, "AndroidRuntime");
        assert_eq!(l.message, "FATAL EXCEPTION: main");
        assert_eq!(l.to_string(), "1700000000123 812 830 E AndroidRuntime: FATAL EXCEPTION: main");
    }

    #[test]
    fn unknown_severity_is_unparsed() {
        let entries = parse_log("1 2 3 X tag: hi\n1 2 3 I tag: hi\n\n");
        assert_eq!(entries.len(), 3);
        assert!(matches!(entries[0], LogEntry::Unparsed(_)));
        assert!(matches!(entries[1], LogEntry::Parsed(_)));
        assert_eq!(entries[2], LogEntry::Unparsed(String::new()));
    }

    #[test]
    fn empty_message() {
        let l = parse_line("1 2 3 I tag: ").unwrap();
        assert_eq!(l.message, "");
        assert_eq!(parse_line("1 2 3 I tag:").unwrap().message, "");
        assert!(parse_line("1 2 3 I tag:x").is_none());
    }
}
