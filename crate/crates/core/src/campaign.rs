//! Campaign configuration: the experiments to run, their repetitions and
//! the seeds each repetition uses.
//!
//! The format is TOML; see `docs/formats.md` for the field-by-field
//! description.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{line_col, FaultSpec, ModelError};

pub const DEFAULT_TEARDOWN_TIMEOUT_MS: u64 = 5_000;
pub const DESK_WARMUP_MS: u64 = 3_000;
pub const PAPER_FAITHFUL_WARMUP_MS: u64 = 30_000;
pub const DEFAULT_RUN_MS: u64 = 10_000;

/// Seeds must fit a TOML integer.
const SEED_MASK: u64 = i64::MAX as u64;

/// Duration defaults applied to plans that leave them unset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DurationProfile {
    #[default]
    Desk,
    PaperFaithful,
}

impl DurationProfile {
    pub fn warmup_ms(self) -> u64 {
        match self {
            DurationProfile::Desk => DESK_WARMUP_MS,
            DurationProfile::PaperFaithful => PAPER_FAITHFUL_WARMUP_MS,
        }
    }

    pub fn run_ms(self) -> u64 {
        DEFAULT_RUN_MS
    }
}

impl FromStr for DurationProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(DurationProfile::Desk),
            "paper-faithful" => Ok(DurationProfile::PaperFaithful),
            other => Err(format!("unknown profile `{other}` (expected desk|paper-faithful)")),
        }
    }
}

/// Targeted stimulus that exercises the injected subsystem.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TriggerAction {
    TakePicture,
    Dial(String),
    ReadSensor,
    ShowActivities,
    StopActivity,
}

impl TriggerAction {
    pub fn name(&self) -> &'static str {
        match self {
            TriggerAction::TakePicture => "take_picture",
            TriggerAction::Dial(_) => "dial",
            TriggerAction::ReadSensor => "read_sensor",
            TriggerAction::ShowActivities => "show_activities",
            TriggerAction::StopActivity => "stop_activity",
        }
    }
}

impl fmt::Display for TriggerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerAction::Dial(number) => write!(f, "dial({number})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for TriggerAction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "take_picture" => Ok(TriggerAction::TakePicture),
            "read_sensor" => Ok(TriggerAction::ReadSensor),
            "show_activities" => Ok(TriggerAction::ShowActivities),
            "stop_activity" => Ok(TriggerAction::StopActivity),
            _ => {
                let number = s
                    .strip_prefix("dial(")
                    .and_then(|r| r.strip_suffix(')'))
                    .filter(|n| !n.is_empty() && n.chars().all(|c| c.is_ascii_digit() || c == '+'))
                    .ok_or_else(|| format!("unknown trigger action `{s}`"))?;
                Ok(TriggerAction::Dial(number.to_string()))
            }
        }
    }
}

impl Serialize for TriggerAction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TriggerAction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How per-repetition seeds are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedMode {
    /// Every repetition gets its own seed.
    #[default]
    PerRepetition,
    /// All repetitions of a plan share one seed.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSettings {
    #[serde(default = "default_teardown")]
    pub teardown_timeout_ms: u64,
    #[serde(default = "default_log_dir")]
    pub log_dir: String,
    pub base_seed: u64,
    #[serde(default)]
    pub seed_mode: SeedMode,
    /// Watchdog threshold for application stalls.
    #[serde(default = "default_anr")]
    pub anr_threshold_ms: u64,
}

fn default_teardown() -> u64 {
    DEFAULT_TEARDOWN_TIMEOUT_MS
}
fn default_log_dir() -> String {
    "logs".into()
}
fn default_anr() -> u64 {
    2_000
}

fn default_workload() -> String {
    "default".into()
}
fn default_robustness() -> String {
    "fragile".into()
}
fn default_subsystem() -> String {
    "control".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub id: String,
    /// Reporting group, e.g. `camera` or `phone`.
    #[serde(default = "default_subsystem")]
    pub subsystem: String,
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerAction>,
    #[serde(default = "default_workload")]
    pub workload: String,
    /// Robustness profile of the target stack.
    #[serde(default = "default_robustness")]
    pub robustness: String,
    /// Explicit per-repetition seeds; derived from the base seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// `None` is a fault-free control experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultSpec>,
}

impl ExperimentPlan {
    pub fn warmup_ms(&self, profile: DurationProfile) -> u64 {
        self.warmup_ms.unwrap_or(profile.warmup_ms())
    }

    pub fn run_ms(&self, profile: DurationProfile) -> u64 {
        self.run_ms.unwrap_or(profile.run_ms())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub global: GlobalSettings,
    #[serde(rename = "experiment", default)]
    pub experiments: Vec<ExperimentPlan>,
}

/// One scheduled execution of a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunEntry {
    pub plan_index: usize,
    pub plan_id: String,
    pub repetition: u32,
    pub seed: u64,
}

impl RunEntry {
    /// Journal key of this run.
    pub fn run_id(&self) -> String {
        format!("{}#{}", self.plan_id, self.repetition)
    }
}

impl CampaignConfig {
    /// Expands plans into runs, plan-major, in declaration order.
    pub fn runs(&self) -> Vec<RunEntry> {
        let mut out = Vec::new();
        for (plan_index, plan) in self.experiments.iter().enumerate() {
            for rep in 0..plan.repetitions {
                let seed = match &plan.seeds {
                    Some(seeds) => seeds[rep as usize],
                    None => {
                        derive_seed(self.global.base_seed, &plan.id, rep, self.global.seed_mode)
                    }
                };
                out.push(RunEntry {
                    plan_index,
                    plan_id: plan.id.clone(),
                    repetition: rep,
                    seed,
                });
            }
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("campaign config serializes")
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for repetition `rep` of plan `plan_id`: a pure function of its
/// arguments, masked to 63 bits.
pub fn derive_seed(base: u64, plan_id: &str, rep: u32, mode: SeedMode) -> u64 {
    let plan = splitmix64(base ^ fnv1a64(plan_id.as_bytes()));
    let seed = match mode {
        SeedMode::Fixed => plan,
        SeedMode::PerRepetition => splitmix64(plan ^ splitmix64(u64::from(rep) + 1)),
    };
    seed & SEED_MASK
}

/// Maps a fault's component-qualified target to an injection point.
pub trait TargetResolver {
    fn resolve(&self, target_ref: &str) -> Option<String>;
}

impl<F: Fn(&str) -> Option<String>> TargetResolver for F {
    fn resolve(&self, target_ref: &str) -> Option<String> {
        self(target_ref)
    }
}

/// Resolver that accepts every target, for configs checked without a
/// topology.
pub fn any_target(target_ref: &str) -> Option<String> {
    Some(target_ref.to_string())
}

#[derive(Debug, Error, PartialEq)]
pub enum CampaignError {
    #[error("campaign config: {0}")]
    Schema(#[from] ModelError),
    #[error("experiment `{0}` is defined more than once")]
    DuplicateExperiment(String),
    #[error("experiment `{id}`: {reason}")]
    InvalidPlan { id: String, reason: String },
    #[error("experiment `{id}`: fault target `{target}` does not resolve to an injection point of the topology")]
    UnresolvedTarget { id: String, target: String },
}

/// Parses and validates a campaign configuration.
pub fn load_campaign(
    text: &str,
    resolver: &dyn TargetResolver,
) -> Result<CampaignConfig, CampaignError> {
    let config: CampaignConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        CampaignError::Schema(ModelError::Parse {
            line,
            column,
            message: e.message().to_string(),
        })
    })?;
    validate_campaign(&config, resolver)?;
    Ok(config)
}

pub fn validate_campaign(
    config: &CampaignConfig,
    resolver: &dyn TargetResolver,
) -> Result<(), CampaignError> {
    let mut ids = BTreeSet::new();
    for plan in &config.experiments {
        let invalid = |reason: &str| CampaignError::InvalidPlan {
            id: plan.id.clone(),
            reason: reason.to_string(),
        };
        if plan.id.is_empty() {
            return Err(invalid("empty experiment id"));
        }
        if !ids.insert(plan.id.as_str()) {
            return Err(CampaignError::DuplicateExperiment(plan.id.clone()));
        }
        if plan.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        if plan.warmup_ms == Some(0) || plan.run_ms == Some(0) {
            return Err(invalid("durations must be positive"));
        }
        if let Some(seeds) = &plan.seeds {
            if seeds.len() != plan.repetitions as usize {
                return Err(invalid("seeds must list one seed per repetition"));
            }
        }
        if let Some(fault) = &plan.fault {
            fault.validate()?;
            let target = fault.target_ref();
            if resolver.resolve(&target).is_none() {
                return Err(CampaignError::UnresolvedTarget {
                    id: plan.id.clone(),
                    target,
                });
            }
        }
    }
    if config.global.teardown_timeout_ms == 0 {
        return Err(CampaignError::InvalidPlan {
            id: "global".into(),
            reason: "teardown_timeout_ms must be positive".into(),
        });
    }
    Ok(())
}
