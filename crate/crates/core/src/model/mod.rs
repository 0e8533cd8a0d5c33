//! Architecture descriptions and the fault model derived from them.
//!
//! An [`ArchitecturalModel`] lists components together with their service
//! interfaces and resources. The checklists in [`checklist`] turn each
//! interface operation and resource into zero or more [`FaultSpec`]s.

mod checklist;
mod export;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inject::{Filter, InjectionAction};

pub use checklist::{
    assign_persistence, derive_fault_model, derive_resource_faults, derive_service_faults,
    question_fires, Effect, FaultCandidate,
};
pub use export::{export_campaign, load_fault_model, render_fault_model, ExportOptions};

/// Highest architecture schema version this crate understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentKind {
    ServiceProcess,
    Library,
    Driver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeScale {
    Small,
    Medium,
    Large,
}

/// Transport a service interface is consumed through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Rpc,
    LocalSocket,
    LibraryCall,
    DeviceFile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceKind {
    Process,
    Thread,
    Memory,
    File,
    DeviceFile,
    Socket,
    Pipe,
    RpcObject,
}

impl ResourceKind {
    pub fn is_execution_context(self) -> bool {
        matches!(self, ResourceKind::Process | ResourceKind::Thread)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    Availability,
    Timeliness,
    OutputValue,
    ResourceManagement,
}

impl FailureMode {
    pub const ALL: [FailureMode; 4] = [
        FailureMode::Availability,
        FailureMode::Timeliness,
        FailureMode::OutputValue,
        FailureMode::ResourceManagement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::Availability => "availability",
            FailureMode::Timeliness => "timeliness",
            FailureMode::OutputValue => "output-value",
            FailureMode::ResourceManagement => "resource-management",
        }
    }

    /// Whether `action` can realize this failure mode.
    pub fn admits(self, action: &InjectionAction) -> bool {
        use InjectionAction::*;
        match self {
            FailureMode::Availability => matches!(action, ReturnError { .. }),
            FailureMode::Timeliness => matches!(action, Delay { .. } | Stall),
            FailureMode::OutputValue => matches!(action, CorruptPayload { .. } | DropMessage),
            FailureMode::ResourceManagement => {
                matches!(action, DenyResource { .. } | Stall | CorruptPayload { .. })
            }
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Persistence {
    Permanent,
    Transient,
}

impl Persistence {
    pub fn as_str(self) -> &'static str {
        match self {
            Persistence::Permanent => "permanent",
            Persistence::Transient => "transient",
        }
    }
}

/// Checklist question that produced a fault. `S*` are service questions,
/// `R*` resource questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Question {
    S1,
    S2,
    S3,
    S4,
    R1,
    R2,
    R3,
    R4,
    R5,
}

impl Question {
    pub const SERVICE: [Question; 4] = [Question::S1, Question::S2, Question::S3, Question::S4];
    pub const RESOURCE: [Question; 5] =
        [Question::R1, Question::R2, Question::R3, Question::R4, Question::R5];

    pub fn as_str(self) -> &'static str {
        match self {
            Question::S1 => "S1",
            Question::S2 => "S2",
            Question::S3 => "S3",
            Question::S4 => "S4",
            Question::R1 => "R1",
            Question::R2 => "R2",
            Question::R3 => "R3",
            Question::R4 => "R4",
            Question::R5 => "R5",
        }
    }
}

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceOperation {
    pub name: String,
    pub declares_errors: bool,
    pub is_async: bool,
    pub high_volume_io: bool,
    pub returns_complex_output: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceInterface {
    pub name: String,
    pub channel: ChannelKind,
    #[serde(rename = "operation")]
    pub operations: Vec<InterfaceOperation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resource {
    pub name: String,
    pub kind: ResourceKind,
    pub permission_protected: bool,
    pub dynamically_allocated: bool,
    pub persistent_file: bool,
    pub spawns_children: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub name: String,
    pub kind: ComponentKind,
    pub size_scale: SizeScale,
    pub has_native_code: bool,
    pub is_multithreaded: bool,
    pub is_event_driven: bool,
    pub processes_bulk_data: bool,
    pub implements_complex_algorithms: bool,
    #[serde(rename = "interface", default)]
    pub interfaces: Vec<ServiceInterface>,
    #[serde(rename = "resource", default)]
    pub resources: Vec<Resource>,
}

impl Component {
    pub fn owns_interface(&self, interface: &ServiceInterface) -> bool {
        self.interfaces.iter().any(|i| i == interface)
    }

    pub fn owns_resource(&self, resource: &Resource) -> bool {
        self.resources.iter().any(|r| r == resource)
    }

    pub fn interface(&self, name: &str) -> Option<&ServiceInterface> {
        self.interfaces.iter().find(|i| i.name == name)
    }

    pub fn resource(&self, name: &str) -> Option<&Resource> {
        self.resources.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitecturalModel {
    pub schema_version: u32,
    #[serde(rename = "component", default)]
    pub components: Vec<Component>,
}

impl ArchitecturalModel {
    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Checks every structural invariant that serde cannot express.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.schema_version == 0 || self.schema_version > SCHEMA_VERSION {
            return Err(ModelError::UnsupportedSchema(self.schema_version));
        }
        let mut components = BTreeSet::new();
        for c in &self.components {
            check_identifier(&c.name)?;
            if !components.insert(c.name.as_str()) {
                return Err(ModelError::DuplicateName {
                    scope: "architecture".into(),
                    name: c.name.clone(),
                });
            }
            let mut interfaces = BTreeSet::new();
            for i in &c.interfaces {
                check_identifier(&i.name)?;
                if !interfaces.insert(i.name.as_str()) {
                    return Err(ModelError::DuplicateName {
                        scope: format!("interfaces of {}", c.name),
                        name: i.name.clone(),
                    });
                }
                if i.operations.is_empty() {
                    return Err(ModelError::EmptyInterface {
                        component: c.name.clone(),
                        interface: i.name.clone(),
                    });
                }
                let mut ops = BTreeSet::new();
                for op in &i.operations {
                    check_identifier(&op.name)?;
                    if !ops.insert(op.name.as_str()) {
                        return Err(ModelError::DuplicateName {
                            scope: format!("operations of {}/{}", c.name, i.name),
                            name: op.name.clone(),
                        });
                    }
                }
            }
            let mut resources = BTreeSet::new();
            for r in &c.resources {
                check_identifier(&r.name)?;
                if !resources.insert(r.name.as_str()) {
                    return Err(ModelError::DuplicateName {
                        scope: format!("resources of {}", c.name),
                        name: r.name.clone(),
                    });
                }
                if r.persistent_file && r.kind != ResourceKind::File {
                    return Err(ModelError::PersistentNonFile {
                        component: c.name.clone(),
                        resource: r.name.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Identifiers are used verbatim inside fault ids, so `/` and whitespace
/// are reserved.
fn check_identifier(name: &str) -> Result<(), ModelError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ModelError::BadIdentifier(name.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown value `{value}` for `{field}` at line {line}")]
    UnknownEnum {
        field: String,
        value: String,
        line: usize,
    },
    #[error("duplicate name `{name}` in {scope}")]
    DuplicateName { scope: String, name: String },
    #[error("unsupported schema_version {0} (supported: 1..={SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error("interface {component}/{interface} declares no operations")]
    EmptyInterface {
        component: String,
        interface: String,
    },
    #[error("resource {component}/{resource} is marked persistent_file but is not a file")]
    PersistentNonFile { component: String, resource: String },
    #[error("`{0}` is not a valid identifier")]
    BadIdentifier(String),
    #[error("interface `{interface}` is not owned by component `{component}`")]
    InterfaceNotOwned { component: String, interface: String },
    #[error("resource `{resource}` is not owned by component `{component}`")]
    ResourceNotOwned { component: String, resource: String },
    #[error("invalid fault spec `{id}`: {reason}")]
    InvalidSpec { id: String, reason: String },
    #[error("invalid export options: {0}")]
    InvalidOptions(String),
}

pub(crate) fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = offset - before.rfind('\n').map(|p| p + 1).unwrap_or(0) + 1;
    (line, column)
}

pub(crate) fn toml_error(text: &str, err: &toml::de::Error) -> ModelError {
    let (line, column) = err.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
    let message = err.message().to_string();
    if let Some(rest) = message.strip_prefix("unknown variant `") {
        let value = rest.split('`').next().unwrap_or_default().to_string();
        let field = text
            .lines()
            .nth(line.saturating_sub(1))
            .and_then(|l| l.split('=').next())
            .map(|k| k.trim().to_string())
            .unwrap_or_default();
        return ModelError::UnknownEnum { field, value, line };
    }
    ModelError::Parse {
        line,
        column,
        message,
    }
}

/// Parses and validates an architecture description.
pub fn load_architecture(source: &str) -> Result<ArchitecturalModel, ModelError> {
    let model: ArchitecturalModel =
        toml::from_str(source).map_err(|e| toml_error(source, &e))?;
    model.validate()?;
    Ok(model)
}

/// What a fault spec tampers with.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Target {
    Operation { interface: String, operation: String },
    Resource { resource: String },
}

impl Target {
    /// `interface.operation` or the bare resource name.
    pub fn label(&self) -> String {
        match self {
            Target::Operation {
                interface,
                operation,
            } => format!("{interface}.{operation}"),
            Target::Resource { resource } => resource.clone(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One injectable fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub id: String,
    pub component: String,
    pub target: Target,
    pub mode: FailureMode,
    pub persistence: Persistence,
    pub provenance: Question,
    pub effect: Effect,
    pub action: InjectionAction,
    #[serde(default)]
    pub filters: Vec<Filter>,
}

impl FaultSpec {
    /// `component/component-qualified target`, the key injection points are
    /// resolved by.
    pub fn target_ref(&self) -> String {
        format!("{}/{}", self.component, self.target.label())
    }

    /// Probability of the first probability filter, if any.
    pub fn probability(&self) -> Option<f64> {
        self.filters.iter().find_map(|f| match f {
            Filter::Probability { p } => Some(*p),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: String| ModelError::InvalidSpec {
            id: self.id.clone(),
            reason,
        };
        if !self.mode.admits(&self.action) {
            return Err(invalid(format!(
                "action {} cannot realize a {} failure",
                self.action.name(),
                self.mode
            )));
        }
        self.action.validate().map_err(|e| invalid(e.to_string()))?;
        for f in &self.filters {
            f.validate().map_err(|e| invalid(e.to_string()))?;
        }
        let probs: Vec<f64> = self
            .filters
            .iter()
            .filter_map(|f| match f {
                Filter::Probability { p } => Some(*p),
                _ => None,
            })
            .collect();
        match self.persistence {
            Persistence::Transient if probs.is_empty() => {
                Err(invalid("transient fault carries no probability filter".into()))
            }
            Persistence::Permanent if probs.iter().any(|p| *p != 1.0) => {
                Err(invalid("permanent fault must inject with probability 1.0".into()))
            }
            _ => Ok(()),
        }
    }
}
