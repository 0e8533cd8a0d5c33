//! Fault-model files and campaign export.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{toml_error, FaultSpec, ModelError};
use crate::campaign::{
    derive_seed, CampaignConfig, ExperimentPlan, GlobalSettings, SeedMode, TriggerAction,
    DEFAULT_TEARDOWN_TIMEOUT_MS,
};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultModelFile {
    schema_version: u32,
    #[serde(rename = "fault", default)]
    faults: Vec<FaultSpec>,
}

/// Renders a fault model as TOML. Entry order is preserved, so rendering a
/// derived model is byte-stable.
pub fn render_fault_model(specs: &[FaultSpec]) -> String {
    toml::to_string(&FaultModelFile {
        schema_version: super::SCHEMA_VERSION,
        faults: specs.to_vec(),
    })
    .expect("fault model serializes")
}

pub fn load_fault_model(text: &str) -> Result<Vec<FaultSpec>, ModelError> {
    let file: FaultModelFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    if file.schema_version != super::SCHEMA_VERSION {
        return Err(ModelError::UnsupportedSchema(file.schema_version));
    }
    for spec in &file.faults {
        spec.validate()?;
    }
    Ok(file.faults)
}

#[derive(Debug, Clone)]
pub struct ExportOptions {
    pub repetitions: u32,
    pub base_seed: u64,
    pub warmup_ms: Option<u64>,
    pub run_ms: Option<u64>,
    pub robustness: String,
    /// Trigger per component; components without an entry get no trigger.
    pub triggers: BTreeMap<String, TriggerAction>,
    /// Reporting group per component; defaults to the component name.
    pub subsystems: BTreeMap<String, String>,
    pub teardown_timeout_ms: u64,
    pub log_dir: String,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            repetitions: 3,
            base_seed: 0,
            warmup_ms: None,
            run_ms: None,
            robustness: "fragile".into(),
            triggers: BTreeMap::new(),
            subsystems: BTreeMap::new(),
            teardown_timeout_ms: DEFAULT_TEARDOWN_TIMEOUT_MS,
            log_dir: "logs".into(),
        }
    }
}

/// Builds a campaign with one plan per fault, each repeated
/// `options.repetitions` times with explicit per-repetition seeds.
pub fn export_campaign(model: &[FaultSpec], options: &ExportOptions) -> Result<String, ModelError> {
    if model.is_empty() {
        return Err(ModelError::InvalidOptions("fault model is empty".into()));
    }
    if options.repetitions == 0 {
        return Err(ModelError::InvalidOptions("repetitions must be at least 1".into()));
    }
    if options.warmup_ms == Some(0) || options.run_ms == Some(0) || options.teardown_timeout_ms == 0
    {
        return Err(ModelError::InvalidOptions("durations must be positive".into()));
    }
    if options.base_seed > i64::MAX as u64 {
        return Err(ModelError::InvalidOptions("base seed must fit in 63 bits".into()));
    }
    let experiments = model
        .iter()
        .map(|spec| ExperimentPlan {
            id: spec.id.clone(),
            subsystem: options
                .subsystems
                .get(&spec.component)
                .cloned()
                .unwrap_or_else(|| spec.component.clone()),
            repetitions: options.repetitions,
            warmup_ms: options.warmup_ms,
            run_ms: options.run_ms,
            trigger: options.triggers.get(&spec.component).cloned(),
            workload: "default".into(),
            robustness: options.robustness.clone(),
            seeds: Some(
                (0..options.repetitions)
                    .map(|r| derive_seed(options.base_seed, &spec.id, r, SeedMode::PerRepetition))
                    .collect(),
            ),
            fault: Some(spec.clone()),
        })
        .collect();
    let config = CampaignConfig {
        global: GlobalSettings {
            teardown_timeout_ms: options.teardown_timeout_ms,
            log_dir: options.log_dir.clone(),
            base_seed: options.base_seed,
            seed_mode: SeedMode::PerRepetition,
            anr_threshold_ms: 2_000,
        },
        experiments,
    };
    Ok(config.to_toml())
}
