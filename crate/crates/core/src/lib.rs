//! Fault-model derivation, wire codecs, injection control and outcome
//! analysis for sirfit.

pub mod analyze;
pub mod campaign;
pub mod inject;
pub mod model;
pub mod wire;
