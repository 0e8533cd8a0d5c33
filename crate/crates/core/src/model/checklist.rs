//! The service and resource checklists.
//!
//! Each question is a predicate over explicit architecture attributes. A
//! question that fires produces a [`FaultCandidate`]; [`assign_persistence`]
//! expands candidates into concrete [`FaultSpec`]s using a fixed table.

use serde::{Deserialize, Serialize};

use super::{
    ArchitecturalModel, ChannelKind, Component, FailureMode, FaultSpec, InterfaceOperation,
    ModelError, Persistence, Question, Resource, ResourceKind, ServiceInterface, SizeScale, Target,
};
use crate::inject::{
    CorruptionSelector, ErrorCode, Filter, InjectionAction, DEFAULT_DELAY_MS,
    PERMANENT_PROBABILITY, TRANSIENT_PROBABILITY,
};
use crate::wire::CorruptionPattern;

/// The concrete misbehaviour a question stands for. Drives the default
/// injection action and the persistence table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect {
    ErrorReturn,
    LostMessage,
    Delay,
    WrongOutput,
    Crash,
    Hang,
    AccessDenied,
    Exhaustion,
    SpawnFailure,
    FileCorruption,
}

impl Effect {
    pub fn as_str(self) -> &'static str {
        match self {
            Effect::ErrorReturn => "error-return",
            Effect::LostMessage => "lost-message",
            Effect::Delay => "delay",
            Effect::WrongOutput => "wrong-output",
            Effect::Crash => "crash",
            Effect::Hang => "hang",
            Effect::AccessDenied => "access-denied",
            Effect::Exhaustion => "exhaustion",
            Effect::SpawnFailure => "spawn-failure",
            Effect::FileCorruption => "file-corruption",
        }
    }

    /// Persistence classification. Effects that persist until someone
    /// cleans up are permanent, one-off events are transient, and effects
    /// that plausibly occur either way get both entries.
    pub fn persistences(self) -> &'static [Persistence] {
        use Persistence::*;
        match self {
            Effect::Crash
            | Effect::Hang
            | Effect::AccessDenied
            | Effect::Exhaustion
            | Effect::FileCorruption => &[Permanent],
            Effect::LostMessage | Effect::WrongOutput => &[Transient],
            Effect::ErrorReturn | Effect::Delay | Effect::SpawnFailure => &[Permanent, Transient],
        }
    }
}

/// A fault before persistence has been assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultCandidate {
    pub component: String,
    pub target: Target,
    pub mode: FailureMode,
    pub provenance: Question,
    pub effect: Effect,
    pub action: InjectionAction,
}

impl FaultCandidate {
    /// Id tag: the question, qualified by the effect when one question can
    /// yield several effects on the same target.
    fn tag(&self) -> String {
        match self.provenance {
            Question::R1 => format!("{}-{}", self.provenance, self.effect.as_str()),
            q => q.to_string(),
        }
    }
}

fn service_question(q: Question, c: &Component, op: &InterfaceOperation) -> bool {
    match q {
        Question::S1 => op.declares_errors,
        Question::S2 => (c.is_multithreaded || c.is_event_driven) && op.is_async,
        Question::S3 => op.high_volume_io || c.processes_bulk_data,
        Question::S4 => op.returns_complex_output && c.implements_complex_algorithms,
        _ => false,
    }
}

fn resource_question(q: Question, c: &Component, r: &Resource) -> bool {
    match q {
        Question::R1 => {
            r.kind.is_execution_context() && c.size_scale == SizeScale::Large && c.has_native_code
        }
        Question::R2 => r.permission_protected,
        Question::R3 => r.dynamically_allocated,
        Question::R4 => r.spawns_children,
        Question::R5 => r.persistent_file,
        _ => false,
    }
}

/// Re-evaluates a question's predicate on a target of `component`. Returns
/// false when the target does not exist or the question does not apply to
/// that kind of target.
pub fn question_fires(q: Question, component: &Component, target: &Target) -> bool {
    match target {
        Target::Operation {
            interface,
            operation,
        } => component
            .interface(interface)
            .and_then(|i| i.operations.iter().find(|o| &o.name == operation))
            .is_some_and(|op| service_question(q, component, op)),
        Target::Resource { resource } => component
            .resource(resource)
            .is_some_and(|r| resource_question(q, component, r)),
    }
}

fn error_for_channel(channel: ChannelKind) -> ErrorCode {
    match channel {
        ChannelKind::Rpc => ErrorCode::ServiceError,
        ChannelKind::LocalSocket | ChannelKind::LibraryCall | ChannelKind::DeviceFile => {
            ErrorCode::Eio
        }
    }
}

/// Applies the service checklist to every operation of `interface`.
pub fn derive_service_faults(
    component: &Component,
    interface: &ServiceInterface,
) -> Result<Vec<FaultCandidate>, ModelError> {
    if !component.owns_interface(interface) {
        return Err(ModelError::InterfaceNotOwned {
            component: component.name.clone(),
            interface: interface.name.clone(),
        });
    }
    let mut out = Vec::new();
    for op in &interface.operations {
        let target = Target::Operation {
            interface: interface.name.clone(),
            operation: op.name.clone(),
        };
        let mut push = |q: Question, mode, effect, action| {
            if service_question(q, component, op) {
                out.push(FaultCandidate {
                    component: component.name.clone(),
                    target: target.clone(),
                    mode,
                    provenance: q,
                    effect,
                    action,
                });
            }
        };
        push(
            Question::S1,
            FailureMode::Availability,
            Effect::ErrorReturn,
            InjectionAction::ReturnError {
                code: error_for_channel(interface.channel),
            },
        );
        push(
            Question::S2,
            FailureMode::Timeliness,
            Effect::LostMessage,
            InjectionAction::Stall,
        );
        push(
            Question::S3,
            FailureMode::Timeliness,
            Effect::Delay,
            InjectionAction::Delay {
                ms: DEFAULT_DELAY_MS,
            },
        );
        push(
            Question::S4,
            FailureMode::OutputValue,
            Effect::WrongOutput,
            InjectionAction::CorruptPayload {
                selector: CorruptionSelector::All,
                pattern: CorruptionPattern::RandomValue,
            },
        );
    }
    Ok(out)
}

/// Applies the resource checklist to `resource`.
pub fn derive_resource_faults(
    component: &Component,
    resource: &Resource,
) -> Result<Vec<FaultCandidate>, ModelError> {
    if !component.owns_resource(resource) {
        return Err(ModelError::ResourceNotOwned {
            component: component.name.clone(),
            resource: resource.name.clone(),
        });
    }
    let target = Target::Resource {
        resource: resource.name.clone(),
    };
    let candidate = |q, effect, action| FaultCandidate {
        component: component.name.clone(),
        target: target.clone(),
        mode: FailureMode::ResourceManagement,
        provenance: q,
        effect,
        action,
    };
    let deny = |code| InjectionAction::DenyResource {
        resource: resource.kind,
        code,
    };
    let mut out = Vec::new();
    if resource_question(Question::R1, component, resource) {
        out.push(candidate(Question::R1, Effect::Crash, deny(ErrorCode::Enomem)));
        out.push(candidate(Question::R1, Effect::Hang, InjectionAction::Stall));
    }
    if resource_question(Question::R2, component, resource) {
        out.push(candidate(Question::R2, Effect::AccessDenied, deny(ErrorCode::Eacces)));
    }
    if resource_question(Question::R3, component, resource) {
        out.push(candidate(Question::R3, Effect::Exhaustion, deny(ErrorCode::Enomem)));
    }
    if resource_question(Question::R4, component, resource) {
        out.push(candidate(Question::R4, Effect::SpawnFailure, deny(ErrorCode::Enomem)));
    }
    if resource_question(Question::R5, component, resource) {
        debug_assert_eq!(resource.kind, ResourceKind::File);
        out.push(candidate(
            Question::R5,
            Effect::FileCorruption,
            InjectionAction::CorruptPayload {
                selector: CorruptionSelector::All,
                pattern: CorruptionPattern::BitFlip,
            },
        ));
    }
    Ok(out)
}

/// Expands a candidate into one entry per applicable persistence, each
/// carrying the default probability filter for that persistence.
pub fn assign_persistence(candidate: &FaultCandidate) -> Vec<FaultSpec> {
    candidate
        .effect
        .persistences()
        .iter()
        .map(|&persistence| {
            let p = match persistence {
                Persistence::Permanent => PERMANENT_PROBABILITY,
                Persistence::Transient => TRANSIENT_PROBABILITY,
            };
            FaultSpec {
                id: format!(
                    "{}/{}/{}/{}",
                    candidate.component,
                    candidate.target.label(),
                    candidate.tag(),
                    persistence.as_str()
                ),
                component: candidate.component.clone(),
                target: candidate.target.clone(),
                mode: candidate.mode,
                persistence,
                provenance: candidate.provenance,
                effect: candidate.effect,
                action: candidate.action.clone(),
                filters: vec![Filter::Probability { p }],
            }
        })
        .collect()
}

/// Derives the complete, persistence-expanded fault model, ordered by
/// component, target, question, effect and persistence.
pub fn derive_fault_model(arch: &ArchitecturalModel) -> Result<Vec<FaultSpec>, ModelError> {
    arch.validate()?;
    let mut specs = Vec::new();
    for c in &arch.components {
        for i in &c.interfaces {
            for cand in derive_service_faults(c, i)? {
                specs.extend(assign_persistence(&cand));
            }
        }
        for r in &c.resources {
            for cand in derive_resource_faults(c, r)? {
                specs.extend(assign_persistence(&cand));
            }
        }
    }
    specs.sort_by(|a, b| {
        (&a.component, &a.target, a.provenance, a.effect, a.persistence).cmp(&(
            &b.component,
            &b.target,
            b.provenance,
            b.effect,
            b.persistence,
        ))
    });
    debug_assert!(specs.windows(2).all(|w| w[0].id != w[1].id));
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComponentKind;

    fn op(name: &str, flags: [bool; 4]) -> InterfaceOperation {
        InterfaceOperation {
            name: name.into(),
            declares_errors: flags[0],
            is_async: flags[1],
            high_volume_io: flags[2],
            returns_complex_output: flags[3],
        }
    }

    fn resource(name: &str, kind: ResourceKind, flags: [bool; 4]) -> Resource {
        Resource {
            name: name.into(),
            kind,
            permission_protected: flags[0],
            dynamically_allocated: flags[1],
            persistent_file: flags[2],
            spawns_children: flags[3],
        }
    }

    fn component(interfaces: Vec<ServiceInterface>, resources: Vec<Resource>) -> Component {
        Component {
            name: "rild".into(),
            kind: ComponentKind::ServiceProcess,
            size_scale: SizeScale::Large,
            has_native_code: true,
            is_multithreaded: true,
            is_event_driven: true,
            processes_bulk_data: false,
            implements_complex_algorithms: true,
            interfaces,
            resources,
        }
    }

    #[test]
    fn receive_with_errors_yields_availability() {
        let iface = ServiceInterface {
            name: "rild-socket".into(),
            channel: ChannelKind::LocalSocket,
            operations: vec![op("receive", [true, false, false, false])],
        };
        let c = component(vec![iface.clone()], vec![]);
        let out = derive_service_faults(&c, &iface).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mode, FailureMode::Availability);
        assert_eq!(out[0].provenance, Question::S1);
        assert_eq!(
            out[0].action,
            InjectionAction::ReturnError {
                code: ErrorCode::Eio
            }
        );
    }

    #[test]
    fn trivial_operation_yields_nothing() {
        let iface = ServiceInterface {
            name: "noop".into(),
            channel: ChannelKind::LibraryCall,
            operations: vec![op("nop", [false; 4])],
        };
        let mut c = component(vec![iface.clone()], vec![]);
        c.is_multithreaded = false;
        c.is_event_driven = false;
        c.implements_complex_algorithms = false;
        assert!(derive_service_faults(&c, &iface).unwrap().is_empty());
    }

    #[test]
    fn foreign_interface_is_rejected() {
        let iface = ServiceInterface {
            name: "other".into(),
            channel: ChannelKind::Rpc,
            operations: vec![op("x", [true; 4])],
        };
        let c = component(vec![], vec![]);
        assert!(matches!(
            derive_service_faults(&c, &iface),
            Err(ModelError::InterfaceNotOwned { .. })
        ));
    }

    #[test]
    fn large_native_process_can_crash_and_hang() {
        let r = resource("rild-process", ResourceKind::Process, [false; 4]);
        let c = component(vec![], vec![r.clone()]);
        let effects: Vec<Effect> = derive_resource_faults(&c, &r)
            .unwrap()
            .iter()
            .map(|f| f.effect)
            .collect();
        assert_eq!(effects, vec![Effect::Crash, Effect::Hang]);
    }

    #[test]
    fn leaking_memory_yields_exhaustion() {
        let r = resource("rild-memory", ResourceKind::Memory, [false, true, false, false]);
        let c = component(vec![], vec![r.clone()]);
        let out = derive_resource_faults(&c, &r).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].effect, Effect::Exhaustion);
        assert_eq!(out[0].provenance, Question::R3);
    }

    #[test]
    fn plain_file_yields_nothing() {
        let r = resource("notes", ResourceKind::File, [false; 4]);
        let c = component(vec![], vec![r.clone()]);
        assert!(derive_resource_faults(&c, &r).unwrap().is_empty());
    }

    #[test]
    fn persistence_table() {
        let base = FaultCandidate {
            component: "c".into(),
            target: Target::Resource {
                resource: "m".into(),
            },
            mode: FailureMode::ResourceManagement,
            provenance: Question::R3,
            effect: Effect::Exhaustion,
            action: InjectionAction::DenyResource {
                resource: ResourceKind::Memory,
                code: ErrorCode::Enomem,
            },
        };
        let specs = assign_persistence(&base);
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].persistence, Persistence::Permanent);
        assert_eq!(specs[0].probability(), Some(1.0));
        assert_eq!(specs[0].id, "c/m/R3/permanent");

        let lost = FaultCandidate {
            target: Target::Operation {
                interface: "i".into(),
                operation: "o".into(),
            },
            mode: FailureMode::Timeliness,
            provenance: Question::S2,
            effect: Effect::LostMessage,
            action: InjectionAction::Stall,
            ..base.clone()
        };
        let specs = assign_persistence(&lost);
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].persistence, Persistence::Transient);
        assert_eq!(specs[0].probability(), Some(0.10));

        let err = FaultCandidate {
            mode: FailureMode::Availability,
            provenance: Question::S1,
            effect: Effect::ErrorReturn,
            action: InjectionAction::ReturnError {
                code: ErrorCode::Eio,
            },
            ..lost
        };
        let persist: Vec<_> = assign_persistence(&err)
            .into_iter()
            .map(|s| s.persistence)
            .collect();
        assert_eq!(persist, vec![Persistence::Permanent, Persistence::Transient]);
    }
}
