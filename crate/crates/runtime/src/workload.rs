//! Background activity keeping the applications busy during a run.
//!
//! Actions are drawn from the workload's mix with a seeded generator and
//! paced at a fixed rate. Every dispatched action is traced with its result
//! and latency; actions still running when the workload stops are traced
//! as pending.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stack::{AppAction, Dispatcher};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub name: String,
    pub actions_per_second: u32,
    pub mix: Vec<AppAction>,
}

impl Workload {
    pub const NAMES: [&'static str; 2] = ["default", "idle"];

    pub fn named(name: &str) -> Option<Workload> {
        let w = |rate, mix: Vec<AppAction>| Workload {
            name: name.to_string(),
            actions_per_second: rate,
            mix,
        };
        match name {
            "default" => Some(w(
                20,
                vec![
                    AppAction::ShowActivities,
                    AppAction::ReadSensor,
                    AppAction::GetPackage,
                    AppAction::GetRegistration,
                ],
            )),
            "idle" => Some(w(0, Vec::new())),
            _ => None,
        }
    }

    /// The first `n` actions this workload draws under `seed`.
    pub fn sequence(&self, seed: u64, n: usize) -> Vec<AppAction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> AppAction {
        self.mix[rng.random_range(0..self.mix.len())].clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionStatus {
    Ok,
    Error,
    /// The application was down or its queue full.
    Rejected,
    /// Still running when the workload stopped.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTrace {
    pub seq: u64,
    /// Dispatch time relative to the workload start.
    pub at_ms: u64,
    pub app: String,
    pub action: String,
    pub status: ActionStatus,
    pub detail: String,
    pub latency_ms: Option<u64>,
}

struct InFlight {
    index: usize,
    sent: Instant,
    rx: Receiver<Result<String, String>>,
}

pub struct WorkloadHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    trace: Arc<Mutex<Vec<ActionTrace>>>,
}

impl WorkloadHandle {
    /// Stops dispatching and returns the trace.
    pub fn finish(mut self) -> Vec<ActionTrace> {
        self.halt();
        std::mem::take(&mut *self.trace.lock().unwrap())
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WorkloadHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn start_workload(workload: &Workload, seed: u64, dispatcher: Dispatcher) -> WorkloadHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let trace = Arc::new(Mutex::new(Vec::new()));
    let thread = (workload.actions_per_second > 0 && !workload.mix.is_empty()).then(|| {
        let (stop, trace) = (Arc::clone(&stop), Arc::clone(&trace));
        let workload = workload.clone();
        thread::spawn(move || drive(&workload, seed, &dispatcher, &stop, &trace))
    });
    WorkloadHandle { stop, thread, trace }
}

/// Runs `workload` for `duration` and returns its trace.
pub fn run_workload(workload: &Workload, seed: u64, dispatcher: Dispatcher, duration: Duration) -> Vec<ActionTrace> {
    let handle = start_workload(workload, seed, dispatcher);
    thread::sleep(duration);
    handle.finish()
}

fn drive(workload: &Workload, seed: u64, dispatcher: &Dispatcher, stop: &AtomicBool, trace: &Mutex<Vec<ActionTrace>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = Duration::from_secs(1) / workload.actions_per_second;
    let start = Instant::now();
    let mut next = start;
    let mut in_flight: Vec<InFlight> = Vec::new();
    let mut seq = 0u64;
    let settle = |in_flight: &mut Vec<InFlight>, trace: &mut Vec<ActionTrace>| {
        in_flight.retain(|f| {
            let (status, detail) = match f.rx.try_recv() {
                Ok(Ok(d)) => (ActionStatus::Ok, d),
                Ok(Err(e)) => (ActionStatus::Error, e),
                Err(TryRecvError::Disconnected) => (ActionStatus::Error, "application died".into()),
                Err(TryRecvError::Empty) => return true,
            };
            let t = &mut trace[f.index];
            t.status = status;
            t.detail = detail;
            t.latency_ms = Some(f.sent.elapsed().as_millis() as u64);
            false
        });
    };
    while !stop.load(Ordering::SeqCst) && !dispatcher.stopped() {
        settle(&mut in_flight, &mut trace.lock().unwrap());
        let now = Instant::now();
        if now < next {
            thread::sleep((next - now).min(Duration::from_millis(10)));
            continue;
        }
        next += period;
        let action = workload.draw(&mut rng);
        let entry = ActionTrace {
            seq,
            at_ms: now.duration_since(start).as_millis() as u64,
            app: action.app().to_string(),
            action: action.name().to_string(),
            status: ActionStatus::Pending,
            detail: String::new(),
            latency_ms: None,
        };
        seq += 1;
        let mut t = trace.lock().unwrap();
        t.push(entry);
        match dispatcher.dispatch_tracked(action) {
            Some(rx) => in_flight.push(InFlight {
                index: t.len() - 1,
                sent: now,
                rx,
            }),
            None => t.last_mut().unwrap().status = ActionStatus::Rejected,
        }
    }
    settle(&mut in_flight, &mut trace.lock().unwrap());
}
