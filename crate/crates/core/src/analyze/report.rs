//! Outcome distributions over classified experiments.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::classify::OutcomeKind;
use super::fisher::{fisher_exact_rxc, ContingencyTable, FisherResult, DEFAULT_BUDGET};

/// The reporting view of one experiment run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedRecord {
    pub plan_id: String,
    pub repetition: u32,
    pub profile: String,
    pub subsystem: String,
    pub mode: String,
    pub persistence: String,
    pub outcome: OutcomeKind,
    pub valid: bool,
}

pub const GROUP_KEYS: &[&str] = &["profile", "subsystem", "mode", "persistence", "plan", "repetition"];

impl ClassifiedRecord {
    fn key(&self, name: &str) -> String {
        match name {
            "profile" => self.profile.clone(),
            "subsystem" => self.subsystem.clone(),
            "mode" => self.mode.clone(),
            "persistence" => self.persistence.clone(),
            "plan" => self.plan_id.clone(),
            "repetition" => self.repetition.to_string(),
            _ => unreachable!("keys are checked up front"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportError {
    #[error("no records to report")]
    Empty,
    #[error("unknown grouping key `{0}` (expected one of: profile, subsystem, mode, persistence, plan, repetition)")]
    UnknownKey(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub key: Vec<String>,
    /// Counts in [`OutcomeKind::ALL`] order.
    pub counts: [u64; 4],
    pub total: u64,
    /// Independence of outcome proportions across repetitions; absent when
    /// fewer than two repetitions were observed in the group.
    pub fisher: Option<FisherResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub keys: Vec<String>,
    pub groups: Vec<GroupRow>,
    /// Valid experiments counted in `groups`.
    pub total: u64,
    /// `(plan, repetition)` of runs excluded as invalid.
    pub invalid: Vec<(String, u32)>,
}

pub fn distribution(records: &[ClassifiedRecord], keys: &[&str]) -> Result<DistributionReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    if let Some(bad) = keys.iter().find(|k| !GROUP_KEYS.contains(k)) {
        return Err(ReportError::UnknownKey(bad.to_string()));
    }
    let mut groups: BTreeMap<Vec<String>, BTreeMap<u32, [u64; 4]>> = BTreeMap::new();
    let mut invalid = Vec::new();
    for r in records {
        if !r.valid {
            invalid.push((r.plan_id.clone(), r.repetition));
            continue;
        }
        let key = keys.iter().map(|k| r.key(k)).collect();
        groups.entry(key).or_default().entry(r.repetition).or_default()[r.outcome.index()] += 1;
    }
    invalid.sort();
    let groups: Vec<GroupRow> = groups
        .into_iter()
        .map(|(key, by_rep)| {
            let mut counts = [0u64; 4];
            for row in by_rep.values() {
                for (c, v) in counts.iter_mut().zip(row) {
                    *c += v;
                }
            }
            let fisher = (by_rep.len() >= 2)
                .then(|| {
                    ContingencyTable::new(
                        by_rep.values().map(|r| r.iter().map(|&v| v as i64).collect()).collect(),
                    )
                    .ok()
                })
                .flatten()
                .map(|t| fisher_exact_rxc(&t, DEFAULT_BUDGET));
            GroupRow {
                key,
                counts,
                total: counts.iter().sum(),
                fisher,
            }
        })
        .collect();
    Ok(DistributionReport {
        keys: keys.iter().map(|k| k.to_string()).collect(),
        total: groups.iter().map(|g| g.total).sum(),
        groups,
        invalid,
    })
}

impl DistributionReport {
    fn p_text(row: &GroupRow) -> String {
        row.fisher.map_or("-".to_string(), |f| format!("{:.4}", f.p_value))
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = self.keys.clone();
        header.extend(OutcomeKind::ALL.iter().map(|k| k.to_string()));
        header.extend(["total".into(), "fisher_p".into()]);
        out.push_str(&header.join(","));
        out.push('\n');
        for g in &self.groups {
            let mut cells = g.key.clone();
            cells.extend(g.counts.iter().map(u64::to_string));
            cells.push(g.total.to_string());
            cells.push(Self::p_text(g));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut header: Vec<String> = self.keys.clone();
        header.extend(OutcomeKind::ALL.iter().map(|k| k.to_string()));
        header.extend(["total".into(), "fisher p".into()]);
        let rows: Vec<Vec<String>> = self
            .groups
            .iter()
            .map(|g| {
                let mut cells = g.key.clone();
                cells.extend(g.counts.iter().map(u64::to_string));
                cells.push(g.total.to_string());
                cells.push(Self::p_text(g));
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].len()]).max().unwrap())
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>()));
        for r in &rows {
            out.push_str(&line(r));
        }
        let _ = writeln!(out, "valid experiments: {}", self.total);
        if !self.invalid.is_empty() {
            let list: Vec<String> = self.invalid.iter().map(|(p, r)| format!("{p}#{r}")).collect();
            let _ = writeln!(out, "invalid (excluded): {}", list.join(", "));
        }
        out
    }

    /// One JSON object per group.
    pub fn render_jsonl(&self) -> String {
        self.groups
            .iter()
            .map(|g| serde_json::to_string(g).expect("group serializes") + "\n")
            .collect()
    }
}
