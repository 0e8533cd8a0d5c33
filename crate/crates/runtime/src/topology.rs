//! Which simulated processes run, what they host, and how fault targets map
//! onto injection points.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sirfit_core::inject::{Binding, Direction, InjectionAction};
use sirfit_core::model::{FaultSpec, Target};
use thiserror::Error;

use crate::net::Framing;
use crate::proxy::ChannelInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    /// Managed-runtime system process; unhandled errors are fatal
    /// exceptions.
    System,
    /// Native daemon; unhandled errors abort with a signal.
    Native,
    /// Application with a main loop watched for responsiveness.
    App,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub name: String,
    pub kind: ProcessKind,
    #[serde(default)]
    pub services: Vec<String>,
    #[serde(default = "default_max_restarts")]
    pub max_restarts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_max_restarts() -> u32 {
    10
}

fn default_backoff() -> u64 {
    200
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(rename = "process")]
    pub processes: Vec<ProcessSpec>,
    /// Device drivers served by the kernel.
    #[serde(default = "default_drivers")]
    pub drivers: Vec<String>,
}

fn default_drivers() -> Vec<String> {
    vec!["video0".into(), "sensor_hub".into(), "ttyS1".into()]
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("topology: {0}")]
    Parse(String),
    #[error("service `{0}` is hosted more than once")]
    DuplicateService(String),
    #[error("process `{0}` is defined more than once")]
    DuplicateProcess(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("unknown driver `{0}`")]
    UnknownDriver(String),
    #[error("application `{0}` cannot host services")]
    AppHostsServices(String),
}

/// Operations of each known channel, by message code.
const CATALOG: &[(&str, &[(u32, &str)])] = &[
    ("activity-manager", &[(1, "start_activity"), (2, "stop_activity"), (3, "show_activities")]),
    ("package-manager", &[(1, "get_package")]),
    ("sensors-service", &[(1, "read_sensor")]),
    ("camera-service", &[(1, "open"), (2, "take_picture"), (3, "set_parameters")]),
    ("rild-socket", &[(1, "dial"), (2, "hangup"), (3, "get_registration")]),
    ("video0", &[(1, "read")]),
    ("sensor_hub", &[(1, "read")]),
    ("ttyS1", &[(1, "read"), (2, "write")]),
];

/// Message code of `operation` on `channel`.
pub fn op_code(channel: &str, operation: &str) -> Option<u32> {
    CATALOG
        .iter()
        .find(|(c, _)| *c == channel)
        .and_then(|(_, ops)| ops.iter().find(|(_, n)| *n == operation).map(|(code, _)| *code))
}

/// Operation name of message `code` on `channel`.
pub fn op_name(channel: &str, code: u32) -> Option<&'static str> {
    CATALOG
        .iter()
        .find(|(c, _)| *c == channel)
        .and_then(|(_, ops)| ops.iter().find(|(c, _)| *c == code).map(|(_, n)| *n))
}

fn known_channel(name: &str) -> bool {
    CATALOG.iter().any(|(c, _)| *c == name)
}

/// Files read through an injection point, by owning service.
const FILES: &[(&str, &str)] = &[("package-manager", "packages-db")];

impl Default for Topology {
    fn default() -> Self {
        let p = |name: &str, kind, services: &[&str]| ProcessSpec {
            name: name.into(),
            kind,
            services: services.iter().map(|s| s.to_string()).collect(),
            max_restarts: default_max_restarts(),
            backoff_ms: default_backoff(),
        };
        Topology {
            processes: vec![
                p(
                    "system_server",
                    ProcessKind::System,
                    &["activity-manager", "package-manager", "sensors-service"],
                ),
                p("media_server", ProcessKind::Native, &["camera-service"]),
                p("rild", ProcessKind::Native, &["rild-socket"]),
                p("camera_app", ProcessKind::App, &[]),
                p("phone_app", ProcessKind::App, &[]),
            ],
            drivers: default_drivers(),
        }
    }
}

impl Topology {
    pub fn load(text: &str) -> Result<Topology, TopologyError> {
        let t: Topology = toml::from_str(text).map_err(|e| TopologyError::Parse(e.message().to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut procs = BTreeSet::new();
        let mut services = BTreeSet::new();
        for p in &self.processes {
            if !procs.insert(&p.name) {
                return Err(TopologyError::DuplicateProcess(p.name.clone()));
            }
            if p.kind == ProcessKind::App && !p.services.is_empty() {
                return Err(TopologyError::AppHostsServices(p.name.clone()));
            }
            for s in &p.services {
                if !known_channel(s) || self.drivers.contains(s) {
                    return Err(TopologyError::UnknownService(s.clone()));
                }
                if !services.insert(s) {
                    return Err(TopologyError::DuplicateService(s.clone()));
                }
            }
        }
        for d in &self.drivers {
            if !matches!(d.as_str(), "video0" | "sensor_hub" | "ttyS1") {
                return Err(TopologyError::UnknownDriver(d.clone()));
            }
            if !services.insert(d) {
                return Err(TopologyError::DuplicateService(d.clone()));
            }
        }
        Ok(())
    }

    pub fn process(&self, name: &str) -> Option<&ProcessSpec> {
        self.processes.iter().find(|p| p.name == name)
    }

    /// Process hosting `service`.
    pub fn host_of(&self, service: &str) -> Option<&ProcessSpec> {
        self.processes.iter().find(|p| p.services.iter().any(|s| s == service))
    }

    /// Every hosted service and driver channel.
    pub fn channels(&self) -> Vec<ChannelInfo> {
        let hosted = self.processes.iter().flat_map(|p| p.services.iter());
        hosted
            .chain(self.drivers.iter())
            .map(|name| {
                let is_driver = self.drivers.contains(name);
                let ops = CATALOG.iter().find(|(c, _)| c == name).map_or(&[][..], |(_, o)| *o);
                ChannelInfo {
                    name: name.clone(),
                    framing: if name == "ttyS1" { Framing::AtLines } else { Framing::Sirf },
                    operations: ops.iter().map(|(c, n)| (*c, n.to_string())).collect(),
                    path_hint: if is_driver {
                        format!("/dev/{name}")
                    } else {
                        format!("/dev/socket/{name}")
                    },
                    open_point: format!("{name}.connect"),
                }
            })
            .collect()
    }

    /// Every injection point the stack consults, mapped to the target
    /// labels that resolve to it.
    pub fn points(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for ch in self.channels() {
            for op in ch.operations.values() {
                out.insert(format!("{}.{op}", ch.name), format!("{}.{op}", ch.name));
            }
            out.insert(ch.open_point.clone(), ch.name.clone());
        }
        for p in &self.processes {
            out.insert(format!("{}.lifecycle", p.name), p.name.clone());
            out.insert(format!("{}.malloc", p.name), format!("{}-heap", p.name));
            for s in &p.services {
                for (svc, file) in FILES {
                    if s == svc {
                        out.insert(format!("{}.file.{file}", p.name), file.to_string());
                    }
                }
                if s == "activity-manager" {
                    out.insert(format!("{}.spawn", p.name), "app-processes".into());
                }
            }
        }
        out
    }

    /// Injection point for a target label (`interface.operation` or a
    /// resource name).
    pub fn point_for_label(&self, label: &str) -> Option<String> {
        self.points()
            .into_iter()
            .find(|(_, l)| l == label)
            .map(|(point, _)| point)
    }

    /// Resolves a campaign `component/label` target reference.
    pub fn resolve_target(&self, target_ref: &str) -> Option<String> {
        let (_, label) = target_ref.split_once('/')?;
        self.point_for_label(label)
    }

    /// Attaches `spec` to the point it targets. Corruption of a SIRF
    /// operation applies to replies, everything else to requests; AT
    /// points carry their direction in the name.
    pub fn binding(&self, spec: &FaultSpec) -> Option<Binding> {
        let label = spec.target.label();
        let point = self.point_for_label(&label)?;
        let direction = match &spec.target {
            Target::Operation { interface, .. } if interface == "ttyS1" => None,
            Target::Operation { .. } => Some(match spec.action {
                InjectionAction::CorruptPayload { .. } => Direction::Reply,
                _ => Direction::Request,
            }),
            Target::Resource { .. } => None,
        };
        Some(Binding {
            point,
            direction,
            spec: spec.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let t = Topology::default();
        t.validate().unwrap();
        assert_eq!(t.processes.len(), 5);
        assert_eq!(Topology::load(&t.to_toml()).unwrap(), t);
    }

    #[test]
    fn duplicate_service() {
        let mut t = Topology::default();
        t.processes[1].services.push("sensors-service".into());
        assert_eq!(t.validate(), Err(TopologyError::DuplicateService("sensors-service".into())));
    }

    #[test]
    fn points_resolve() {
        let t = Topology::default();
        assert_eq!(t.resolve_target("media_server/camera-service.take_picture").as_deref(), Some("camera-service.take_picture"));
        assert_eq!(t.resolve_target("sensor-driver/sensor_hub").as_deref(), Some("sensor_hub.connect"));
        assert_eq!(t.resolve_target("rild/rild-heap").as_deref(), Some("rild.malloc"));
        assert_eq!(t.resolve_target("rild/rild").as_deref(), Some("rild.lifecycle"));
        assert_eq!(t.resolve_target("system_server/packages-db").as_deref(), Some("system_server.file.packages-db"));
        assert_eq!(t.resolve_target("x/nothing"), None);
    }
}
