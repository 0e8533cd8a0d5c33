//! Log parsing, outcome classification and statistical reporting.

mod classify;
mod fisher;
mod log;
mod report;

pub use classify::{classify, is_anr_message, line_kinds, Outcome, OutcomeKind};
pub use fisher::{
    fisher_exact_2x2, fisher_exact_rxc, fisher_exact_rxc_with, ContingencyTable, FisherError,
    FisherMethod, FisherResult, DEFAULT_BUDGET, DEFAULT_MC_SEED, DEFAULT_SAMPLES,
    RELATIVE_TOLERANCE,
};
pub use log::{parse_line, parse_log, LogEntry, LogLine, Severity};
pub use report::{distribution, ClassifiedRecord, DistributionReport, GroupRow, ReportError, GROUP_KEYS};
