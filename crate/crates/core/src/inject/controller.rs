//! Filter evaluation, action application and the injection log.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ErrorCode, Filter, InjectionAction};
use crate::campaign::{fnv1a64, splitmix64};
use crate::model::FaultSpec;
use crate::wire::{corrupt_transaction, error_frame, CorruptError, FieldKind, Transaction, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Request,
    Reply,
}

/// One intercepted call or message, as seen by the filters.
#[derive(Debug, Clone, Copy)]
pub struct InvocationContext<'a> {
    pub point: &'a str,
    pub direction: Direction,
    pub path_hint: Option<&'a str>,
    pub payload: &'a [u8],
    pub active_trigger: Option<&'a str>,
    pub sequence_no: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Inject(InjectionAction),
    Pass,
}

/// Seed of the generator used for one (spec, invocation) pair.
pub fn invocation_seed(seed: u64, spec_id: &str, point: &str, sequence_no: u64) -> u64 {
    splitmix64(
        seed ^ fnv1a64(spec_id.as_bytes()).rotate_left(17)
            ^ splitmix64(sequence_no ^ fnv1a64(point.as_bytes())),
    )
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Evaluates every filter of `spec` for one invocation, in order.
pub fn evaluate_filters(spec: &FaultSpec, ctx: &InvocationContext<'_>, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(invocation_seed(seed, &spec.id, ctx.point, ctx.sequence_no));
    spec.filters
        .iter()
        .map(|f| match f {
            Filter::Probability { p } if *p >= 1.0 => true,
            Filter::Probability { p } if *p <= 0.0 => false,
            Filter::Probability { p } => rng.random::<f64>() < *p,
            Filter::PathContains { substring } => {
                ctx.path_hint.is_some_and(|h| h.contains(substring.as_str()))
            }
            Filter::MessagePattern { bytes } => contains(ctx.payload, bytes),
            Filter::ActiveTrigger { tag } => ctx.active_trigger == Some(tag.as_str()),
        })
        .collect()
}

/// Injects iff every filter holds. Deterministic in (spec, ctx, seed).
pub fn decide(spec: &FaultSpec, ctx: &InvocationContext<'_>, seed: u64) -> Decision {
    if evaluate_filters(spec, ctx, seed).into_iter().all(|b| b) {
        Decision::Inject(spec.action.clone())
    } else {
        Decision::Pass
    }
}

/// What a channel relay does with an intercepted frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameVerdict {
    Forward(Transaction),
    /// Answer the sender with this frame; the original is not forwarded.
    Respond(Transaction),
    Delay { ms: u64 },
    Stall,
    Drop,
}

pub fn apply_frame<R: Rng + ?Sized>(
    action: &InjectionAction,
    t: &Transaction,
    rng: &mut R,
) -> Result<FrameVerdict, CorruptError> {
    Ok(match action {
        InjectionAction::ReturnError { code } | InjectionAction::DenyResource { code, .. } => {
            FrameVerdict::Respond(error_frame(t.code, code.as_str()))
        }
        InjectionAction::Delay { ms } => FrameVerdict::Delay { ms: *ms },
        InjectionAction::Stall => FrameVerdict::Stall,
        InjectionAction::DropMessage => FrameVerdict::Drop,
        InjectionAction::CorruptPayload { selector, pattern } => {
            FrameVerdict::Forward(corrupt_transaction(t, *selector, pattern, rng)?)
        }
    })
}

/// What a hooked in-process call does.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallVerdict {
    Fail(ErrorCode),
    Delay { ms: u64 },
    Stall,
    Drop,
    /// Proceed, but hand the caller these bytes instead of the real result.
    Replace(Vec<u8>),
}

/// Applies `action` to a call whose result is `payload`. Corruption treats
/// the payload as a blob, or as a string when the pattern only applies to
/// strings.
pub fn apply_call<R: Rng + ?Sized>(
    action: &InjectionAction,
    payload: &[u8],
    rng: &mut R,
) -> Result<CallVerdict, CorruptError> {
    Ok(match action {
        InjectionAction::ReturnError { code } | InjectionAction::DenyResource { code, .. } => {
            CallVerdict::Fail(*code)
        }
        InjectionAction::Delay { ms } => CallVerdict::Delay { ms: *ms },
        InjectionAction::Stall => CallVerdict::Stall,
        InjectionAction::DropMessage => CallVerdict::Drop,
        InjectionAction::CorruptPayload { selector, pattern } => {
            let value = match std::str::from_utf8(payload) {
                Ok(s) if !pattern.applies_to(FieldKind::Blob) => Value::Utf8String(s.to_string()),
                _ => Value::Blob(payload.to_vec()),
            };
            let t = Transaction::new(0).with(1, value);
            let out = corrupt_transaction(&t, *selector, pattern, rng)?;
            CallVerdict::Replace(match out.field(1) {
                Some(Value::Blob(b)) => b.clone(),
                Some(Value::Utf8String(s)) => s.clone().into_bytes(),
                _ => payload.to_vec(),
            })
        }
    })
}

/// Short hex SHA-256 of a payload.
pub fn payload_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evidence of one applied injection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub spec_id: String,
    pub point: String,
    pub sequence_no: u64,
    pub timestamp_ms: u64,
    pub action: String,
    pub pre_digest: String,
    /// Digest of what was delivered instead, absent when nothing was.
    pub post_digest: Option<String>,
}

/// One line per record, JSON encoded.
pub fn render_injection_log(records: &[InjectionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn parse_injection_log(text: &str) -> Result<Vec<InjectionRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// A fault spec attached to an injection point.
#[derive(Debug, Clone)]
pub struct Binding {
    pub point: String,
    /// Restricts the spec to one direction; `None` matches both.
    pub direction: Option<Direction>,
    pub spec: FaultSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub point: String,
    pub sequence_no: u64,
    pub spec_id: String,
    pub filters: Vec<bool>,
    pub inject: bool,
    pub applied: bool,
}

#[derive(Default)]
struct State {
    sequence: HashMap<String, u64>,
    log: Vec<InjectionRecord>,
    trace: Vec<DecisionTrace>,
    errors: Vec<String>,
}

fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Shared by every interposition point of an experiment. Decisions, sequence
/// numbers and log appends happen under one lock, so each invocation is
/// atomic; delays and stalls are carried out by the caller afterwards.
pub struct Controller {
    seed: u64,
    bindings: Vec<Binding>,
    armed: AtomicBool,
    trigger: Mutex<Option<String>>,
    tracing: bool,
    clock: fn() -> u64,
    state: Mutex<State>,
}

impl Controller {
    /// A controller that starts armed.
    pub fn new(seed: u64, bindings: Vec<Binding>) -> Controller {
        Controller {
            seed,
            bindings,
            armed: AtomicBool::new(true),
            trigger: Mutex::new(None),
            tracing: false,
            clock: wall_clock_ms,
            state: Mutex::new(State::default()),
        }
    }

    /// Keeps a trace of every filter evaluation.
    pub fn with_trace(mut self) -> Controller {
        self.tracing = true;
        self
    }

    pub fn with_clock(mut self, clock: fn() -> u64) -> Controller {
        self.clock = clock;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    pub fn has_point(&self, point: &str) -> bool {
        self.bindings.iter().any(|b| b.point == point)
    }

    pub fn arm(&self) {
        self.armed.store(true, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }

    pub fn is_armed(&self) -> bool {
        self.armed.load(Ordering::SeqCst)
    }

    pub fn set_active_trigger(&self, tag: Option<&str>) {
        *self.trigger.lock().unwrap() = tag.map(str::to_string);
    }

    /// Runs one invocation through the bound specs. The first spec whose
    /// filters all hold is applied through `apply`, which returns the
    /// caller's verdict and the bytes delivered instead (if any). Returns
    /// `Ok(None)` to pass the invocation through unchanged.
    pub fn intercept<V>(
        &self,
        point: &str,
        direction: Direction,
        path_hint: Option<&str>,
        raw: &[u8],
        apply: impl FnOnce(&InjectionAction, &mut ChaCha8Rng) -> Result<(V, Option<Vec<u8>>), CorruptError>,
    ) -> Result<Option<V>, CorruptError> {
        let trigger = self.trigger.lock().unwrap().clone();
        let mut state = self.state.lock().unwrap();
        let counter = state.sequence.entry(point.to_string()).or_insert(0);
        let sequence_no = *counter;
        *counter += 1;
        if !self.is_armed() {
            return Ok(None);
        }
        let ctx = InvocationContext {
            point,
            direction,
            path_hint,
            payload: raw,
            active_trigger: trigger.as_deref(),
            sequence_no,
        };
        let mut chosen = None;
        for b in &self.bindings {
            if b.point != point || b.direction.is_some_and(|d| d != direction) {
                continue;
            }
            let filters = evaluate_filters(&b.spec, &ctx, self.seed);
            let inject = filters.iter().all(|f| *f);
            if self.tracing {
                state.trace.push(DecisionTrace {
                    point: point.to_string(),
                    sequence_no,
                    spec_id: b.spec.id.clone(),
                    filters,
                    inject,
                    applied: false,
                });
            }
            if inject {
                chosen = Some(&b.spec);
                break;
            }
        }
        let Some(spec) = chosen else {
            return Ok(None);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(
            invocation_seed(self.seed, &spec.id, point, sequence_no).wrapping_add(1),
        );
        match apply(&spec.action, &mut rng) {
            Ok((verdict, delivered)) => {
                if self.tracing {
                    if let Some(t) = state.trace.last_mut() {
                        t.applied = true;
                    }
                }
                let record = InjectionRecord {
                    spec_id: spec.id.clone(),
                    point: point.to_string(),
                    sequence_no,
                    timestamp_ms: (self.clock)(),
                    action: spec.action.to_string(),
                    pre_digest: payload_digest(raw),
                    post_digest: delivered.as_deref().map(payload_digest),
                };
                state.log.push(record);
                Ok(Some(verdict))
            }
            Err(e) => {
                state.errors.push(format!("{} at {point}#{sequence_no}: {e}", spec.id));
                Err(e)
            }
        }
    }

    /// [`Controller::intercept`] for a decoded SIRF frame.
    pub fn intercept_frame(
        &self,
        point: &str,
        direction: Direction,
        path_hint: Option<&str>,
        raw: &[u8],
        t: &Transaction,
    ) -> Result<Option<FrameVerdict>, CorruptError> {
        self.intercept(point, direction, path_hint, raw, |action, rng| {
            let v = apply_frame(action, t, rng)?;
            let delivered = match &v {
                FrameVerdict::Forward(t) | FrameVerdict::Respond(t) => crate::wire::encode(t).ok(),
                FrameVerdict::Delay { .. } => Some(raw.to_vec()),
                FrameVerdict::Stall | FrameVerdict::Drop => None,
            };
            Ok((v, delivered))
        })
    }

    /// [`Controller::intercept`] for an in-process call whose result is
    /// `payload`.
    pub fn intercept_call(
        &self,
        point: &str,
        path_hint: Option<&str>,
        payload: &[u8],
    ) -> Result<Option<CallVerdict>, CorruptError> {
        self.intercept(point, Direction::Request, path_hint, payload, |action, rng| {
            let v = apply_call(action, payload, rng)?;
            let delivered = match &v {
                CallVerdict::Replace(b) => Some(b.clone()),
                CallVerdict::Delay { .. } => Some(payload.to_vec()),
                _ => None,
            };
            Ok((v, delivered))
        })
    }

    pub fn injection_log(&self) -> Vec<InjectionRecord> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn trace(&self) -> Vec<DecisionTrace> {
        self.state.lock().unwrap().trace.clone()
    }

    /// Corruption failures, which make the experiment invalid.
    pub fn errors(&self) -> Vec<String> {
        self.state.lock().unwrap().errors.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FailureMode, Persistence, Question, Target};
    use crate::model::Effect;
    use crate::wire::{CorruptionPattern, Selector};

    fn spec(filters: Vec<Filter>, action: InjectionAction) -> FaultSpec {
        FaultSpec {
            id: "svc/if.op/S1/transient".into(),
            component: "svc".into(),
            target: Target::Operation {
                interface: "if".into(),
                operation: "op".into(),
            },
            mode: FailureMode::Availability,
            persistence: Persistence::Transient,
            provenance: Question::S1,
            effect: Effect::ErrorReturn,
            action,
            filters,
        }
    }

    fn ctx(seq: u64) -> InvocationContext<'static> {
        InvocationContext {
            point: "p",
            direction: Direction::Request,
            path_hint: Some("/dev/video0"),
            payload: b"SIRF\x01\x07\0\0\0",
            active_trigger: None,
            sequence_no: seq,
        }
    }

    fn err() -> InjectionAction {
        InjectionAction::ReturnError { code: ErrorCode::Enomem }
    }

    #[test]
    fn trivial_probabilities() {
        let always = spec(vec![Filter::Probability { p: 1.0 }], err());
        let never = spec(vec![Filter::Probability { p: 0.0 }], err());
        for seq in 0..100 {
            assert_eq!(decide(&always, &ctx(seq), 3), Decision::Inject(err()));
            assert_eq!(decide(&never, &ctx(seq), 3), Decision::Pass);
        }
    }

    #[test]
    fn decisions_repeat() {
        let s = spec(vec![Filter::Probability { p: 0.5 }], err());
        let a: Vec<_> = (0..200).map(|i| decide(&s, &ctx(i), 9)).collect();
        let b: Vec<_> = (0..200).map(|i| decide(&s, &ctx(i), 9)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn content_filters() {
        let path = spec(vec![Filter::PathContains { substring: "video".into() }], err());
        let other = spec(vec![Filter::PathContains { substring: "ttyS".into() }], err());
        let code7 = spec(vec![Filter::MessagePattern { bytes: b"\x07\0\0\0".to_vec() }], err());
        let trig = spec(vec![Filter::ActiveTrigger { tag: "dial".into() }], err());
        assert!(matches!(decide(&path, &ctx(0), 0), Decision::Inject(_)));
        assert_eq!(decide(&other, &ctx(0), 0), Decision::Pass);
        assert!(matches!(decide(&code7, &ctx(0), 0), Decision::Inject(_)));
        assert_eq!(decide(&trig, &ctx(0), 0), Decision::Pass);
        let mut c = ctx(0);
        c.active_trigger = Some("dial");
        assert!(matches!(decide(&trig, &c, 0), Decision::Inject(_)));
    }

    #[test]
    fn return_error_answers_with_error_frame() {
        let t = Transaction::new(4).with(1, Value::Int32(1));
        let v = apply_frame(&err(), &t, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let FrameVerdict::Respond(reply) = v else { panic!() };
        assert_eq!(reply.error_code(), Some("ENOMEM"));
        assert_eq!(reply.code, 4);
    }

    #[test]
    fn call_corruption_flips_file_bits() {
        let action = InjectionAction::CorruptPayload {
            selector: Selector::All,
            pattern: CorruptionPattern::BitFlip,
        };
        let data = vec![0u8; 100];
        let CallVerdict::Replace(out) = apply_call(&action, &data, &mut ChaCha8Rng::seed_from_u64(1)).unwrap() else {
            panic!()
        };
        assert_eq!(out.iter().map(|b| b.count_ones()).sum::<u32>(), 2);
    }

    #[test]
    fn controller_logs_once_per_injection() {
        let s = spec(vec![Filter::Probability { p: 0.1 }], err());
        let c = Controller::new(
            5,
            vec![Binding {
                point: "p".into(),
                direction: None,
                spec: s,
            }],
        )
        .with_trace();
        let t = Transaction::new(1);
        let raw = crate::wire::encode(&t).unwrap();
        let mut hits = 0;
        for _ in 0..1000 {
            if c.intercept_frame("p", Direction::Request, None, &raw, &t).unwrap().is_some() {
                hits += 1;
            }
        }
        let log = c.injection_log();
        assert_eq!(log.len(), hits);
        assert_eq!(c.trace().iter().filter(|t| t.inject).count(), hits);
        let seqs: Vec<u64> = log.iter().map(|r| r.sequence_no).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(parse_injection_log(&render_injection_log(&log)).unwrap(), log);
    }

    #[test]
    fn disarmed_controller_passes() {
        let s = spec(vec![Filter::Probability { p: 1.0 }], err());
        let c = Controller::new(0, vec![Binding { point: "p".into(), direction: None, spec: s }]);
        c.disarm();
        assert_eq!(c.intercept_call("p", None, b"x").unwrap(), None);
        c.arm();
        assert_eq!(
            c.intercept_call("p", None, b"x").unwrap(),
            Some(CallVerdict::Fail(ErrorCode::Enomem))
        );
        assert_eq!(c.injection_log()[0].sequence_no, 1);
    }
}
