//! Outcome classification of one experiment's log.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::log::{LogEntry, LogLine};

/// Ordered by severity: `NoFailure < Fatal < Anr < Crash`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    NoFailure,
    Fatal,
    #[serde(rename = "ANR")]
    Anr,
    Crash,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 4] = [
        OutcomeKind::Crash,
        OutcomeKind::Anr,
        OutcomeKind::Fatal,
        OutcomeKind::NoFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Crash => "Crash",
            OutcomeKind::Anr => "ANR",
            OutcomeKind::Fatal => "Fatal",
            OutcomeKind::NoFailure => "NoFailure",
        }
    }

    /// Position in [`OutcomeKind::ALL`].
    pub fn index(self) -> usize {
        OutcomeKind::ALL.iter().position(|k| *k == self).unwrap()
    }
}

impl fmt::Display for OutcomeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutcomeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutcomeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown outcome `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub primary: OutcomeKind,
    /// Every line that matched some failure criterion, in log order.
    pub evidence: Vec<LogLine>,
    pub all_observed: BTreeSet<OutcomeKind>,
}

/// `ANR in <name>` with a non-empty name.
pub fn is_anr_message(message: &str) -> bool {
    message.match_indices("ANR in ").any(|(i, m)| {
        message[i + m.len()..]
            .chars()
            .next()
            .is_some_and(|c| !c.is_whitespace())
    })
}

/// Failure kinds a single line evidences.
pub fn line_kinds(line: &LogLine) -> Vec<OutcomeKind> {
    let mut kinds = Vec::new();
    if line.message.contains("FATAL EXCEPTION") {
        kinds.push(OutcomeKind::Crash);
    }
    if is_anr_message(&line.message) {
        kinds.push(OutcomeKind::Anr);
    }
    if line.severity.is_fatal() {
        kinds.push(OutcomeKind::Fatal);
    }
    kinds
}

/// Classifies a log. Only lines that parse are considered. The primary
/// outcome is the most severe kind observed.
pub fn classify(log: &[LogEntry]) -> Outcome {
    let mut evidence = Vec::new();
    let mut all_observed = BTreeSet::new();
    for line in log.iter().filter_map(LogEntry::line) {
        let kinds = line_kinds(line);
        if !kinds.is_empty() {
            evidence.push(line.clone());
            all_observed.extend(kinds);
        }
    }
    Outcome {
        primary: all_observed.iter().next_back().copied().unwrap_or(OutcomeKind::NoFailure),
        evidence,
        all_observed,
    }
}
