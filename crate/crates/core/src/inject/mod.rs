//! Injection actions, filters, the injection controller and the in-process
//! call registry.

mod controller;
mod registry;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::ResourceKind;
pub use crate::wire::Selector as CorruptionSelector;
use crate::wire::CorruptionPattern;

pub use controller::{
    apply_call, apply_frame, decide, evaluate_filters, invocation_seed, parse_injection_log,
    payload_digest, render_injection_log, Binding, CallVerdict, Controller, Decision,
    DecisionTrace, Direction, FrameVerdict, InjectionRecord, InvocationContext,
};
pub use registry::{HookHandle, Registry, RegistryError};

/// Delay applied by timing faults when the model does not say otherwise.
pub const DEFAULT_DELAY_MS: u64 = 5_000;
/// Shorter delay used by desk-scale campaigns.
pub const DESK_DELAY_MS: u64 = 500;
pub const TRANSIENT_PROBABILITY: f64 = 0.10;
pub const PERMANENT_PROBABILITY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorCode {
    Enomem,
    Enodev,
    Eio,
    Eacces,
    ServiceError,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 5] = [
        ErrorCode::Enomem,
        ErrorCode::Enodev,
        ErrorCode::Eio,
        ErrorCode::Eacces,
        ErrorCode::ServiceError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Enomem => "ENOMEM",
            ErrorCode::Enodev => "ENODEV",
            ErrorCode::Eio => "EIO",
            ErrorCode::Eacces => "EACCES",
            ErrorCode::ServiceError => "SERVICE_ERROR",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCode::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error code `{s}`"))
    }
}

impl Serialize for ErrorCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ErrorCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InjectionAction {
    /// Answer the call with an error instead of forwarding it.
    ReturnError { code: ErrorCode },
    /// Hold the message for `ms` milliseconds, then forward it.
    Delay { ms: u64 },
    /// Withhold the message until teardown.
    Stall,
    DropMessage,
    CorruptPayload {
        selector: CorruptionSelector,
        pattern: CorruptionPattern,
    },
    /// Make a resource request fail.
    DenyResource { resource: ResourceKind, code: ErrorCode },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("delay must be positive")]
    ZeroDelay,
    #[error("categorical domain is empty")]
    EmptyDomain,
    #[error("filter probability {0} is outside [0, 1]")]
    BadProbability(String),
    #[error("filter pattern is empty")]
    EmptyPattern,
}

impl InjectionAction {
    pub fn name(&self) -> &'static str {
        match self {
            InjectionAction::ReturnError { .. } => "return-error",
            InjectionAction::Delay { .. } => "delay",
            InjectionAction::Stall => "stall",
            InjectionAction::DropMessage => "drop-message",
            InjectionAction::CorruptPayload { .. } => "corrupt-payload",
            InjectionAction::DenyResource { .. } => "deny-resource",
        }
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        match self {
            InjectionAction::Delay { ms: 0 } => Err(ActionError::ZeroDelay),
            InjectionAction::CorruptPayload { pattern, .. } => check_pattern(pattern),
            _ => Ok(()),
        }
    }
}

fn check_pattern(pattern: &CorruptionPattern) -> Result<(), ActionError> {
    match pattern {
        CorruptionPattern::CategoricalReplace { domain } if domain.is_empty() => {
            Err(ActionError::EmptyDomain)
        }
        CorruptionPattern::StructFieldCorrupt { inner, .. } => check_pattern(inner),
        _ => Ok(()),
    }
}

impl fmt::Display for InjectionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InjectionAction::ReturnError { code } => write!(f, "return-error({code})"),
            InjectionAction::Delay { ms } => write!(f, "delay({ms}ms)"),
            InjectionAction::CorruptPayload { selector, pattern } => {
                write!(f, "corrupt-payload({selector},{})", pattern.name())
            }
            InjectionAction::DenyResource { code, .. } => write!(f, "deny-resource({code})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Filter {
    /// True for a seeded random fraction `p` of invocations.
    Probability { p: f64 },
    /// True when the invocation's path hint contains `substring`.
    PathContains { substring: String },
    /// True when the raw message bytes contain `hex`, written as hex digits
    /// (whitespace allowed).
    MessagePattern {
        #[serde(rename = "hex", with = "hex_bytes")]
        bytes: Vec<u8>,
    },
    /// True while the named trigger action is executing.
    ActiveTrigger { tag: String },
}

impl Filter {
    pub fn validate(&self) -> Result<(), ActionError> {
        match self {
            Filter::Probability { p } if !(0.0..=1.0).contains(p) => {
                Err(ActionError::BadProbability(p.to_string()))
            }
            Filter::PathContains { substring: s } | Filter::ActiveTrigger { tag: s } if s.is_empty() => {
                Err(ActionError::EmptyPattern)
            }
            Filter::MessagePattern { bytes } if bytes.is_empty() => Err(ActionError::EmptyPattern),
            _ => Ok(()),
        }
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let text: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        let digits: Vec<u8> = text.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
        if !digits.len().is_multiple_of(2) {
            return Err(serde::de::Error::custom("odd number of hex digits"));
        }
        digits
            .chunks(2)
            .map(|pair| {
                std::str::from_utf8(pair)
                    .ok()
                    .and_then(|p| u8::from_str_radix(p, 16).ok())
                    .ok_or_else(|| serde::de::Error::custom("invalid hex digit"))
            })
            .collect()
    }
}
