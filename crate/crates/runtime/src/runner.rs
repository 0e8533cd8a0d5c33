//! Runs campaigns against fresh stacks and persists their records.
//!
//! Layout of a campaign output directory:
//!
//! ```text
//! <out>/journal.jsonl            one ExperimentRecord per completed run
//! <out>/report.csv, report.txt   outcome distribution
//! <out>/<log_dir>/<run>/         logcat.txt, injections.jsonl,
//!                                workload.jsonl, decisions.jsonl
//! ```
//!
//! `<run>` is the run id with `/` replaced by `_`.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sirfit_core::analyze::{classify, distribution, ClassifiedRecord, DistributionReport, LogEntry, OutcomeKind, ReportError};
use sirfit_core::campaign::{CampaignConfig, DurationProfile, ExperimentPlan, GlobalSettings, RunEntry};
use sirfit_core::inject::{render_injection_log, Controller, InjectionRecord};
use sirfit_core::model::Persistence;
use thiserror::Error;

use crate::logsink::now_ms;
use crate::stack::{RobustnessProfile, Stack, StackConfig};
use crate::topology::Topology;
use crate::workload::{start_workload, Workload};

pub const JOURNAL: &str = "journal.jsonl";

/// Grouping of the campaign report.
pub const REPORT_KEYS: [&str; 4] = ["profile", "subsystem", "mode", "persistence"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerReport {
    pub action: String,
    pub ok: bool,
    pub detail: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub started_ms: u64,
    pub warmup_ms: u64,
    pub run_ms: u64,
    pub teardown_ms: u64,
    pub total_ms: u64,
}

/// One completed run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub plan_id: String,
    pub repetition: u32,
    pub seed: u64,
    pub subsystem: String,
    pub profile: String,
    /// Failure mode of the fault, `control` without one.
    pub mode: String,
    /// Persistence of the fault, `control` without one.
    pub persistence: String,
    pub fault_id: Option<String>,
    pub outcome: OutcomeKind,
    pub all_observed: Vec<OutcomeKind>,
    /// Log lines that evidenced a failure.
    pub evidence: Vec<String>,
    pub valid: bool,
    pub invalid_reason: Option<String>,
    pub injections: Vec<InjectionRecord>,
    pub trigger: Option<TriggerReport>,
    pub workload_actions: usize,
    pub log_lines: usize,
    /// Run directory relative to the campaign output directory.
    pub artifacts: String,
    pub forced_kills: usize,
    pub timings: Timings,
}

impl ExperimentRecord {
    pub fn classified(&self) -> ClassifiedRecord {
        ClassifiedRecord {
            plan_id: self.plan_id.clone(),
            repetition: self.repetition,
            profile: self.profile.clone(),
            subsystem: self.subsystem.clone(),
            mode: self.mode.clone(),
            persistence: self.persistence.clone(),
            outcome: self.outcome,
            valid: self.valid,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("experiment `{plan}`: {reason}")]
    Plan { plan: String, reason: String },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct RunnerOptions {
    pub profile: DurationProfile,
    pub out_dir: PathBuf,
    pub topology: Topology,
    /// Record every injection decision, not only the applied ones.
    pub trace: bool,
    /// Stop after this many new runs, leaving the rest for a resume.
    pub limit: Option<usize>,
}

impl RunnerOptions {
    pub fn new(out_dir: &Path) -> RunnerOptions {
        RunnerOptions {
            profile: DurationProfile::Desk,
            out_dir: out_dir.to_path_buf(),
            topology: Topology::default(),
            trace: false,
            limit: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignSummary {
    /// Every record in the journal, in run order.
    pub records: Vec<ExperimentRecord>,
    /// Runs executed by this invocation.
    pub executed: usize,
    /// Runs skipped because the journal already had them.
    pub resumed: usize,
    pub report: Option<DistributionReport>,
}

fn run_dir_name(run_id: &str) -> String {
    run_id.replace('/', "_")
}

/// Runs one repetition of `plan` on a fresh stack. Artifacts go to
/// `artifacts_dir`.
pub fn run_experiment(
    plan: &ExperimentPlan,
    entry: &RunEntry,
    global: &GlobalSettings,
    options: &RunnerOptions,
    artifacts_dir: &Path,
) -> Result<ExperimentRecord, RunError> {
    let started = Instant::now();
    let started_ms = now_ms();
    let plan_err = |reason: String| RunError::Plan {
        plan: plan.id.clone(),
        reason,
    };
    let profile = RobustnessProfile::named(&plan.robustness)
        .ok_or_else(|| plan_err(format!("unknown robustness profile `{}`", plan.robustness)))?;
    let workload =
        Workload::named(&plan.workload).ok_or_else(|| plan_err(format!("unknown workload `{}`", plan.workload)))?;
    let bindings = match &plan.fault {
        Some(f) => vec![options
            .topology
            .binding(f)
            .ok_or_else(|| plan_err(format!("fault target `{}` has no injection point", f.target_ref())))?],
        None => Vec::new(),
    };
    let mut controller = Controller::new(entry.seed, bindings);
    if options.trace {
        controller = controller.with_trace();
    }
    let controller = Arc::new(controller);
    controller.disarm();

    let sockets = tempfile::Builder::new().prefix("sf").tempdir_in(std::env::temp_dir())?;
    let cfg = StackConfig {
        topology: options.topology.clone(),
        profile: profile.clone(),
        anr_threshold_ms: global.anr_threshold_ms,
        ..StackConfig::default()
    };
    let mut stack = Stack::start(sockets.path(), cfg, Arc::clone(&controller))?;
    let healthy = stack.wait_healthy(Duration::from_secs(10));

    let warmup_ms = plan.warmup_ms(options.profile);
    let run_ms = plan.run_ms(options.profile);
    let workload_seed = sirfit_core::campaign::splitmix64(entry.seed);
    let load = start_workload(&workload, workload_seed, stack.dispatcher());
    thread::sleep(Duration::from_millis(warmup_ms));

    controller.arm();
    let run_start = Instant::now();
    let trigger = plan.trigger.as_ref().map(|t| {
        let r = stack.trigger(t, Duration::from_millis(run_ms));
        TriggerReport {
            action: r.action,
            ok: r.ok,
            detail: r.detail,
            latency_ms: r.latency_ms,
        }
    });
    let left = Duration::from_millis(run_ms).saturating_sub(run_start.elapsed());
    thread::sleep(left);
    controller.disarm();
    let actions = load.finish();

    let teardown_start = Instant::now();
    let stop = stack.stop(Duration::from_millis(global.teardown_timeout_ms));
    let teardown_ms = teardown_start.elapsed().as_millis() as u64;
    let lines = stack.logs();
    drop(stack);

    let injections = controller.injection_log();
    let entries: Vec<LogEntry> = lines.iter().cloned().map(LogEntry::Parsed).collect();
    let outcome = classify(&entries);

    let invalid_reason = if !healthy {
        Some("stack did not become healthy".to_string())
    } else if !controller.errors().is_empty() {
        Some(format!("injection failed: {}", controller.errors().join("; ")))
    } else if plan
        .fault
        .as_ref()
        .is_some_and(|f| f.persistence == Persistence::Permanent && injections.is_empty())
    {
        Some("the permanent fault was never injected".to_string())
    } else {
        None
    };

    fs::create_dir_all(artifacts_dir)?;
    let log_text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(artifacts_dir.join("logcat.txt"), log_text)?;
    fs::write(artifacts_dir.join("injections.jsonl"), render_injection_log(&injections))?;
    let jsonl = |items: Vec<String>| items.into_iter().map(|s| s + "\n").collect::<String>();
    fs::write(
        artifacts_dir.join("workload.jsonl"),
        jsonl(actions.iter().map(|a| serde_json::to_string(a).expect("trace serializes")).collect()),
    )?;
    if options.trace {
        fs::write(
            artifacts_dir.join("decisions.jsonl"),
            jsonl(controller.trace().iter().map(|d| serde_json::to_string(d).expect("trace serializes")).collect()),
        )?;
    }

    let artifacts = artifacts_dir
        .strip_prefix(&options.out_dir)
        .unwrap_or(artifacts_dir)
        .to_string_lossy()
        .into_owned();
    Ok(ExperimentRecord {
        run_id: entry.run_id(),
        plan_id: plan.id.clone(),
        repetition: entry.repetition,
        seed: entry.seed,
        subsystem: plan.subsystem.clone(),
        profile: profile.name,
        mode: plan.fault.as_ref().map_or("control".into(), |f| f.mode.to_string()),
        persistence: plan
            .fault
            .as_ref()
            .map_or("control".into(), |f| f.persistence.as_str().to_string()),
        fault_id: plan.fault.as_ref().map(|f| f.id.clone()),
        outcome: outcome.primary,
        all_observed: outcome.all_observed.into_iter().collect(),
        evidence: outcome.evidence.iter().map(|l| l.to_string()).collect(),
        valid: invalid_reason.is_none(),
        invalid_reason,
        injections,
        trigger,
        workload_actions: actions.len(),
        log_lines: lines.len(),
        artifacts,
        forced_kills: stop.forced,
        timings: Timings {
            started_ms,
            warmup_ms,
            run_ms,
            teardown_ms,
            total_ms: started.elapsed().as_millis() as u64,
        },
    })
}

/// Reads the journal of `out_dir`. A torn final line, left by an
/// interrupted write, is ignored.
pub fn load_journal(out_dir: &Path) -> Result<Vec<ExperimentRecord>, RunError> {
    let path = out_dir.join(JOURNAL);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {}
            Err(e) => {
                return Err(RunError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn append_journal(out_dir: &Path, record: &ExperimentRecord) -> io::Result<()> {
    let path = out_dir.join(JOURNAL);
    if let Ok(text) = fs::read_to_string(&path) {
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            fs::write(&path, &text[..keep])?;
        }
    }
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    let line = serde_json::to_string(record).expect("record serializes") + "\n";
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

/// Writes `report.csv`, `report.txt` and `report.jsonl` for `records`.
pub fn write_report(out_dir: &Path, records: &[ExperimentRecord]) -> Result<DistributionReport, ReportError> {
    let classified: Vec<ClassifiedRecord> = records.iter().map(ExperimentRecord::classified).collect();
    let report = distribution(&classified, &REPORT_KEYS)?;
    let _ = fs::write(out_dir.join("report.csv"), report.render_csv());
    let _ = fs::write(out_dir.join("report.txt"), report.render_table());
    let _ = fs::write(out_dir.join("report.jsonl"), report.render_jsonl());
    Ok(report)
}

/// Runs every scheduled run not already in the journal, one at a time,
/// each on a fresh stack. `progress` sees each new record.
pub fn run_campaign(
    config: &CampaignConfig,
    options: &RunnerOptions,
    progress: &mut dyn FnMut(&ExperimentRecord),
) -> Result<CampaignSummary, RunError> {
    fs::create_dir_all(&options.out_dir)?;
    let done: BTreeSet<String> = load_journal(&options.out_dir)?.into_iter().map(|r| r.run_id).collect();
    let runs = config.runs();
    let mut executed = 0;
    let mut resumed = 0;
    for entry in &runs {
        if done.contains(&entry.run_id()) {
            resumed += 1;
            continue;
        }
        if options.limit.is_some_and(|l| executed >= l) {
            break;
        }
        let plan = &config.experiments[entry.plan_index];
        let dir = options
            .out_dir
            .join(&config.global.log_dir)
            .join(run_dir_name(&entry.run_id()));
        let record = run_experiment(plan, entry, &config.global, options, &dir)?;
        append_journal(&options.out_dir, &record)?;
        progress(&record);
        executed += 1;
    }
    let journal = load_journal(&options.out_dir)?;
    let order: Vec<String> = runs.iter().map(RunEntry::run_id).collect();
    let mut records: Vec<ExperimentRecord> = journal.into_iter().filter(|r| order.contains(&r.run_id)).collect();
    records.sort_by_key(|r| order.iter().position(|id| *id == r.run_id));
    let report = write_report(&options.out_dir, &records).ok();
    Ok(CampaignSummary {
        records,
        executed,
        resumed,
        report,
    })
}
