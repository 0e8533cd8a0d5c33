//! In-memory logcat buffer shared by every simulated process.

use std::sync::{Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use sirfit_core::analyze::{LogLine, Severity};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Default)]
pub struct LogSink {
    lines: Mutex<Vec<LogLine>>,
}

/// Holds the buffer; appending through a guard keeps a check-then-append
/// sequence atomic with respect to other writers.
pub struct LogGuard<'a>(MutexGuard<'a, Vec<LogLine>>);

impl LogGuard<'_> {
    pub fn push(&mut self, pid: u32, tid: u32, severity: Severity, tag: &str, message: &str) {
        self.0.push(LogLine {
            timestamp_ms: now_ms(),
            pid,
            tid,
            severity,
            tag: tag.to_string(),
            message: message.replace(['\r', '\n'], " "),
        });
    }
}

impl LogSink {
    pub fn lock(&self) -> LogGuard<'_> {
        LogGuard(self.lines.lock().unwrap())
    }

    pub fn push(&self, pid: u32, tid: u32, severity: Severity, tag: &str, message: &str) {
        self.lock().push(pid, tid, severity, tag, message);
    }

    pub fn snapshot(&self) -> Vec<LogLine> {
        self.lines.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.lines.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn render(&self) -> String {
        self.snapshot().iter().map(|l| format!("{l}\n")).collect()
    }
}
