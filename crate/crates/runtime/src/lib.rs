//! Runtime half of sirfit: a simulated device stack, the interposition
//! proxy, workloads and the campaign runner.

pub mod logsink;
pub mod net;
pub mod proxy;
pub mod runner;
pub mod stack;
pub mod topology;
pub mod workload;

pub use stack::{AppAction, RobustnessProfile, Stack, StackConfig, TriggerOutcome};
pub use topology::Topology;
