//! The simulated device stack.
//!
//! Each simulated process is a group of threads sharing a crash domain:
//! when the process dies its threads stop logging and serving, its sockets
//! disappear, and the supervisor restarts it after a backoff. Services
//! talk over local stream sockets; with interposition enabled every client
//! connects through a proxy in front of the real endpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use sirfit_core::analyze::{LogLine, Severity};
use sirfit_core::campaign::TriggerAction;
use sirfit_core::inject::{CallVerdict, Controller, Registry};
use sirfit_core::wire::{decode, decode_at, encode, error_frame, AtKind, AtMessage, Transaction, Value, FLAG_REPLY};

use crate::logsink::{now_ms, LogSink};
use crate::net::{self, accept_loop, bind, write_all, CallError, Framing, MessageReader, POLL};
use crate::proxy::{attach_proxy, ProxyHandle};
use crate::topology::{op_code, ProcessKind, ProcessSpec, Topology};

/// Contents of the pristine package database.
pub const PRISTINE_PACKAGES: &str = "com.example.camera=1.4.2\ncom.example.phone=2.0.1\ncom.android.settings=9.0\n";

/// Parameter values camera-service accepts.
pub const CAMERA_PARAMS: [&str; 3] = ["whitebalance=auto", "whitebalance=daylight", "whitebalance=fluorescent"];

pub const PICTURE_LEN: usize = 4096;
pub const SENSOR_LIMIT: f64 = 20.0;

/// How a process reacts to an error it did not expect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handler {
    /// The error propagates and kills the process.
    Unhandled,
    /// Logged at fatal severity; the caller gets an error.
    CatchAndReport,
    /// Logged as a warning; the failed peer is restarted.
    CatchAndRecover,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RobustnessProfile {
    pub name: String,
    default: Handler,
    overrides: BTreeMap<String, Handler>,
}

impl RobustnessProfile {
    pub const NAMES: [&'static str; 3] = ["fragile", "graceful", "mixed"];

    pub fn named(name: &str) -> Option<RobustnessProfile> {
        let p = |default, overrides: &[(&str, Handler)]| RobustnessProfile {
            name: name.to_string(),
            default,
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        };
        match name {
            "fragile" => Some(p(Handler::Unhandled, &[])),
            "graceful" => Some(p(Handler::CatchAndRecover, &[])),
            "mixed" => Some(p(
                Handler::CatchAndReport,
                &[
                    ("system_server", Handler::Unhandled),
                    ("media_server", Handler::CatchAndRecover),
                    ("rild", Handler::CatchAndRecover),
                ],
            )),
            _ => None,
        }
    }

    pub fn handler(&self, process: &str) -> Handler {
        self.overrides.get(process).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub topology: Topology,
    pub profile: RobustnessProfile,
    pub anr_threshold_ms: u64,
    /// Timeout of application calls into services.
    pub app_call_timeout_ms: u64,
    /// Timeout of service calls into drivers.
    pub service_call_timeout_ms: u64,
    /// Route every client connection through a proxy.
    pub interpose: bool,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            topology: Topology::default(),
            profile: RobustnessProfile::named("fragile").unwrap(),
            anr_threshold_ms: 2_000,
            app_call_timeout_ms: 30_000,
            service_call_timeout_ms: 5_000,
            interpose: true,
        }
    }
}

/// Work an application performs on its main loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppAction {
    TakePicture,
    ShowActivities,
    StopActivity,
    Dial(String),
    ReadSensor,
    GetPackage,
    GetRegistration,
}

impl AppAction {
    pub fn app(&self) -> &'static str {
        match self {
            AppAction::TakePicture | AppAction::ShowActivities | AppAction::StopActivity => "camera_app",
            _ => "phone_app",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AppAction::TakePicture => "take_picture",
            AppAction::ShowActivities => "show_activities",
            AppAction::StopActivity => "stop_activity",
            AppAction::Dial(_) => "dial",
            AppAction::ReadSensor => "read_sensor",
            AppAction::GetPackage => "get_package",
            AppAction::GetRegistration => "get_registration",
        }
    }
}

impl From<&TriggerAction> for AppAction {
    fn from(t: &TriggerAction) -> AppAction {
        match t {
            TriggerAction::TakePicture => AppAction::TakePicture,
            TriggerAction::Dial(n) => AppAction::Dial(n.clone()),
            TriggerAction::ReadSensor => AppAction::ReadSensor,
            TriggerAction::ShowActivities => AppAction::ShowActivities,
            TriggerAction::StopActivity => AppAction::StopActivity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerOutcome {
    pub action: String,
    /// The action completed and its result validated.
    pub ok: bool,
    pub detail: String,
    pub latency_ms: u64,
}

/// Result of tearing the stack down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopReport {
    /// Threads still running when the teardown timeout expired.
    pub forced: usize,
}

struct Task {
    action: AppAction,
    done: Option<Sender<Result<String, String>>>,
}

const QUEUE_DEPTH: usize = 64;
const NO_EPISODE: u64 = u64::MAX;

#[derive(Default)]
struct AppSlot {
    queue: Mutex<Option<SyncSender<Task>>>,
    heartbeat: AtomicU64,
    /// Heartbeat value of the last reported ANR episode.
    anr_at: AtomicU64,
}

struct SimProc {
    spec: ProcessSpec,
    pid: AtomicU32,
    generation: AtomicU64,
    alive: AtomicBool,
    frozen: AtomicBool,
    restarts: AtomicU32,
    gave_up: AtomicBool,
    died_at: Mutex<Option<Instant>>,
    next_tid: AtomicU32,
    app: AppSlot,
}

impl SimProc {
    fn new(spec: ProcessSpec) -> SimProc {
        SimProc {
            spec,
            pid: AtomicU32::new(0),
            generation: AtomicU64::new(0),
            alive: AtomicBool::new(false),
            frozen: AtomicBool::new(false),
            restarts: AtomicU32::new(0),
            gave_up: AtomicBool::new(false),
            died_at: Mutex::new(None),
            next_tid: AtomicU32::new(0),
            app: AppSlot::default(),
        }
    }

    fn name(&self) -> &str {
        &self.spec.name
    }
}

#[derive(Default)]
struct Modem {
    link: Mutex<Option<(u64, Arc<Mutex<UnixStream>>)>>,
    pending: Mutex<Option<Sender<AtMessage>>>,
    command: Mutex<()>,
    last_creg: AtomicU64,
}

struct Inner {
    cfg: StackConfig,
    run_dir: PathBuf,
    log: LogSink,
    registry: Registry,
    controller: Arc<Controller>,
    procs: BTreeMap<String, Arc<SimProc>>,
    kernel: Arc<SimProc>,
    stop: AtomicBool,
    next_pid: AtomicU32,
    workers: Mutex<Vec<JoinHandle<()>>>,
    modem: Modem,
}

/// Why a request could not be served.
enum Fault {
    /// An expected error answered to the caller.
    Reply(String),
    /// An unexpected error, handled according to the process's profile.
    /// `provider` names the service that failed, if any.
    Internal { code: String, provider: Option<String> },
}

fn internal(code: impl Into<String>, provider: Option<&str>) -> Fault {
    Fault::Internal {
        code: code.into(),
        provider: provider.map(str::to_string),
    }
}

impl From<(CallError, &str)> for Fault {
    fn from((e, provider): (CallError, &str)) -> Fault {
        internal(e.code(), Some(provider))
    }
}

/// Outcome of consulting an in-process injection point.
enum Consult {
    Proceed(Option<Vec<u8>>),
    Fail(String),
}

/// A thread's view of its process at one generation.
#[derive(Clone)]
struct Ctx {
    inner: Arc<Inner>,
    proc: Arc<SimProc>,
    generation: u64,
    pid: u32,
    tid: u32,
}

impl Ctx {
    fn name(&self) -> &str {
        self.proc.name()
    }

    fn current(&self) -> bool {
        !self.inner.stopped()
            && self.proc.alive.load(Ordering::SeqCst)
            && self.proc.generation.load(Ordering::SeqCst) == self.generation
    }

    fn log(&self, severity: Severity, tag: &str, message: &str) {
        let mut g = self.inner.log.lock();
        if self.current() {
            g.push(self.pid, self.tid, severity, tag, message);
        }
    }

    /// Starts a thread in the same process.
    fn thread(&self, name: &str, f: impl FnOnce(Ctx) + Send + 'static) {
        let mut ctx = self.clone();
        ctx.tid = self.pid + self.proc.next_tid.fetch_add(1, Ordering::SeqCst) + 1;
        self.inner.spawn(name, move || f(ctx));
    }

    /// Sleeps while the process lives; false once it does not.
    fn sleep(&self, ms: u64) -> bool {
        let until = Instant::now() + Duration::from_millis(ms);
        while self.current() && Instant::now() < until {
            thread::sleep(POLL);
        }
        self.current()
    }

    /// Blocks while the process is frozen.
    fn wait_thawed(&self) -> bool {
        while self.current() && self.proc.frozen.load(Ordering::SeqCst) {
            thread::sleep(POLL);
        }
        self.current()
    }

    fn hold(&self) {
        while self.current() {
            thread::sleep(POLL);
        }
    }

    fn die(&self) {
        self.inner.kill(&self.proc, self.generation);
    }

    fn call(&self, service: &str, t: &Transaction, timeout_ms: u64) -> Result<Transaction, CallError> {
        let me = self.clone();
        net::call(
            &self.inner.endpoint(service),
            t,
            Duration::from_millis(timeout_ms),
            &move || !me.current(),
        )
    }

    fn consult(&self, point: &str, path: Option<&str>, payload: &[u8]) -> Consult {
        match self.inner.registry.call(point, path, payload) {
            None => Consult::Proceed(None),
            Some(CallVerdict::Fail(code)) => Consult::Fail(code.as_str().to_string()),
            Some(CallVerdict::Drop) => Consult::Fail("EIO".into()),
            Some(CallVerdict::Delay { ms }) => {
                self.sleep(ms);
                Consult::Proceed(None)
            }
            Some(CallVerdict::Stall) => {
                self.hold();
                Consult::Fail("STOPPED".into())
            }
            Some(CallVerdict::Replace(bytes)) => Consult::Proceed(Some(bytes)),
        }
    }

    fn malloc(&self) -> Result<(), Fault> {
        match self.consult(&format!("{}.malloc", self.name()), None, b"") {
            Consult::Fail(code) => Err(internal(code, None)),
            Consult::Proceed(_) => Ok(()),
        }
    }

    /// Applies the process's handler to an unexpected error. Returns the
    /// code to report to the caller, or `None` if the process died.
    fn on_fault(&self, what: &str, code: &str, provider: Option<&str>) -> Option<String> {
        if !self.current() {
            return None;
        }
        match self.inner.cfg.profile.handler(self.name()) {
            Handler::Unhandled => {
                self.crash(what, code);
                None
            }
            Handler::CatchAndReport => {
                self.log(Severity::F, tag_of(self.proc.spec.kind, self.name()), &format!("{what}: unrecoverable error {code}"));
                Some(code.to_string())
            }
            Handler::CatchAndRecover => {
                self.log(Severity::W, tag_of(self.proc.spec.kind, self.name()), &format!("{what}: recovered from {code}"));
                if let Some(host) = provider.and_then(|p| self.inner.cfg.topology.host_of(p)) {
                    if host.kind == ProcessKind::Native && host.name != self.name() {
                        self.log(Severity::I, tag_of(self.proc.spec.kind, self.name()), &format!("restarting {}", host.name));
                        self.inner.restart(&host.name);
                    }
                }
                Some(code.to_string())
            }
        }
    }

    fn crash(&self, what: &str, code: &str) {
        match self.proc.spec.kind {
            ProcessKind::System => {
                self.log(Severity::E, "AndroidRuntime", &format!("*** FATAL EXCEPTION IN SYSTEM PROCESS: {what}"));
                self.log(Severity::E, "AndroidRuntime", &format!("java.lang.IllegalStateException: {code}"));
            }
            ProcessKind::App => {
                self.log(Severity::E, "AndroidRuntime", "FATAL EXCEPTION: main");
                self.log(Severity::E, "AndroidRuntime", &format!("Process: {}, PID: {}", self.name(), self.pid));
                self.log(Severity::E, "AndroidRuntime", &format!("java.lang.RuntimeException: {what}: {code}"));
            }
            ProcessKind::Native => {
                self.log(
                    Severity::F,
                    "libc",
                    &format!("Fatal signal 6 (SIGABRT), code -6 in tid {} ({})", self.tid, self.name()),
                );
                self.log(Severity::F, "DEBUG", &format!("Abort message: '{what}: {code}'"));
            }
        }
        self.die();
    }

    fn segfault(&self) {
        self.log(
            Severity::F,
            "libc",
            &format!("Fatal signal 11 (SIGSEGV), code 1, fault addr 0x0 in tid {} ({})", self.tid, self.name()),
        );
        self.die();
    }
}

/// Log tag of a service: `camera-service` logs as `CameraService`.
fn service_tag(service: &str) -> String {
    service
        .split(['-', '_'])
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
        })
        .collect()
}

fn tag_of(kind: ProcessKind, name: &str) -> &str {
    match kind {
        ProcessKind::System => "SystemServer",
        _ => name,
    }
}

impl Inner {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn spawn(&self, name: &str, f: impl FnOnce() + Send + 'static) {
        if let Ok(h) = thread::Builder::new().name(name.to_string()).spawn(f) {
            let mut w = self.workers.lock().unwrap();
            w.retain(|h| !h.is_finished());
            w.push(h);
        }
    }

    fn socket(&self, service: &str) -> PathBuf {
        self.run_dir.join(format!("{service}.sock"))
    }

    fn proxy_socket(&self, service: &str) -> PathBuf {
        self.run_dir.join(format!("{service}.fi.sock"))
    }

    /// Where clients of `service` connect.
    fn endpoint(&self, service: &str) -> PathBuf {
        if self.cfg.interpose {
            self.proxy_socket(service)
        } else {
            self.socket(service)
        }
    }

    fn state_file(&self) -> PathBuf {
        self.run_dir.join("state").join("packages.db")
    }

    fn init_log(&self, severity: Severity, message: &str) {
        if !self.stopped() {
            self.log.push(1, 1, severity, "init", message);
        }
    }

    /// Marks `proc` dead if it is still at `generation`.
    fn kill(&self, proc: &SimProc, generation: u64) {
        {
            let _g = self.log.lock();
            if proc.generation.load(Ordering::SeqCst) != generation || !proc.alive.swap(false, Ordering::SeqCst) {
                return;
            }
        }
        *proc.died_at.lock().unwrap() = Some(Instant::now());
        for s in &proc.spec.services {
            let _ = fs::remove_file(self.socket(s));
        }
        *proc.app.queue.lock().unwrap() = None;
    }

    fn enqueue(&self, action: AppAction, done: Option<Sender<Result<String, String>>>) -> bool {
        let Some(p) = self.procs.get(action.app()) else {
            return false;
        };
        let queue = p.app.queue.lock().unwrap();
        match queue.as_ref().map(|q| q.try_send(Task { action, done })) {
            Some(Ok(())) => true,
            Some(Err(TrySendError::Full(_) | TrySendError::Disconnected(_))) | None => false,
        }
    }

    /// Kills `name` so the supervisor restarts it without delay.
    fn restart(&self, name: &str) {
        if let Some(p) = self.procs.get(name) {
            self.kill(p, p.generation.load(Ordering::SeqCst));
            *p.died_at.lock().unwrap() = Some(Instant::now() - Duration::from_millis(p.spec.backoff_ms));
        }
    }
}

#[derive(Clone)]
pub struct Dispatcher(Arc<Inner>);

impl Dispatcher {
    pub fn dispatch(&self, action: AppAction) -> bool {
        self.0.enqueue(action, None)
    }

    /// Like [`Dispatcher::dispatch`], returning a channel that receives the
    /// action's result.
    pub fn dispatch_tracked(&self, action: AppAction) -> Option<Receiver<Result<String, String>>> {
        let (tx, rx) = mpsc::channel();
        self.0.enqueue(action, Some(tx)).then_some(rx)
    }

    pub fn stopped(&self) -> bool {
        self.0.stopped()
    }
}

/// A running stack.
pub struct Stack {
    inner: Arc<Inner>,
    proxies: Vec<ProxyHandle>,
    stopped: bool,
}

impl Stack {
    /// Starts drivers, proxies and every process. `run_dir` holds the
    /// sockets and the state files and must be short enough for socket
    /// paths.
    pub fn start(run_dir: &Path, cfg: StackConfig, controller: Arc<Controller>) -> io::Result<Stack> {
        cfg.topology
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        fs::create_dir_all(run_dir.join("state"))?;
        fs::write(run_dir.join("state").join("packages.db"), PRISTINE_PACKAGES)?;
        let registry = Registry::new();
        for point in cfg.topology.points().keys() {
            let in_process = [".lifecycle", ".malloc", ".spawn"].iter().any(|s| point.ends_with(s))
                || point.contains(".file.");
            if in_process {
                registry.register(point);
            }
        }
        for point in registry.points() {
            registry
                .install_hook(&point, Arc::clone(&controller))
                .expect("registered point");
        }
        let procs = cfg
            .topology
            .processes
            .iter()
            .map(|p| (p.name.clone(), Arc::new(SimProc::new(p.clone()))))
            .collect();
        let kernel = Arc::new(SimProc::new(ProcessSpec {
            name: "kernel".into(),
            kind: ProcessKind::Native,
            services: cfg.topology.drivers.clone(),
            max_restarts: 0,
            backoff_ms: 0,
        }));
        kernel.alive.store(true, Ordering::SeqCst);
        let inner = Arc::new(Inner {
            cfg,
            run_dir: run_dir.to_path_buf(),
            log: LogSink::default(),
            registry,
            controller,
            procs,
            kernel,
            stop: AtomicBool::new(false),
            next_pid: AtomicU32::new(1000),
            workers: Mutex::new(Vec::new()),
            modem: Modem::default(),
        });
        let mut proxies = Vec::new();
        if inner.cfg.interpose {
            for ch in inner.cfg.topology.channels() {
                let (listen, upstream) = (inner.proxy_socket(&ch.name), inner.socket(&ch.name));
                proxies.push(attach_proxy(&listen, &upstream, ch, Arc::clone(&inner.controller))?);
            }
        }
        let kctx = Ctx {
            inner: Arc::clone(&inner),
            proc: Arc::clone(&inner.kernel),
            generation: 0,
            pid: 0,
            tid: 0,
        };
        for d in &inner.cfg.topology.drivers {
            start_listener(&kctx, d)?;
        }
        inner.init_log(Severity::I, "kernel drivers ready");
        for p in inner.procs.values() {
            start_process(&inner, p);
        }
        let sup = Arc::clone(&inner);
        inner.spawn("supervisor", move || supervise(&sup));
        inner.init_log(Severity::I, "boot completed");
        Ok(Stack {
            inner,
            proxies,
            stopped: false,
        })
    }

    pub fn controller(&self) -> &Arc<Controller> {
        &self.inner.controller
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn run_dir(&self) -> &Path {
        &self.inner.run_dir
    }

    pub fn state_file(&self) -> PathBuf {
        self.inner.state_file()
    }

    pub fn endpoint(&self, service: &str) -> PathBuf {
        self.inner.endpoint(service)
    }

    pub fn service_socket(&self, service: &str) -> PathBuf {
        self.inner.socket(service)
    }

    pub fn logs(&self) -> Vec<LogLine> {
        self.inner.log.snapshot()
    }

    pub fn render_logs(&self) -> String {
        self.inner.log.render()
    }

    /// Pid of `process` if it is alive.
    pub fn pid_of(&self, process: &str) -> Option<u32> {
        let p = self.inner.procs.get(process)?;
        p.alive.load(Ordering::SeqCst).then(|| p.pid.load(Ordering::SeqCst))
    }

    pub fn restarts(&self, process: &str) -> u32 {
        self.inner.procs.get(process).map_or(0, |p| p.restarts.load(Ordering::SeqCst))
    }

    /// Liveness of every process.
    pub fn health(&self) -> BTreeMap<String, bool> {
        self.inner
            .procs
            .iter()
            .map(|(n, p)| (n.clone(), p.alive.load(Ordering::SeqCst) && !p.frozen.load(Ordering::SeqCst)))
            .collect()
    }

    pub fn all_healthy(&self) -> bool {
        self.health().values().all(|ok| *ok)
    }

    /// Waits up to `timeout` for every process to be up.
    pub fn wait_healthy(&self, timeout: Duration) -> bool {
        let until = Instant::now() + timeout;
        while Instant::now() < until {
            if self.all_healthy() {
                return true;
            }
            thread::sleep(POLL);
        }
        self.all_healthy()
    }

    /// Kills a process as if by a signal, for tests and manual runs.
    pub fn kill(&self, process: &str) {
        if let Some(p) = self.inner.procs.get(process) {
            let pid = p.pid.load(Ordering::SeqCst);
            self.inner.init_log(Severity::I, &format!("killing '{process}' (pid {pid})"));
            self.inner.kill(p, p.generation.load(Ordering::SeqCst));
        }
    }

    /// Queues `action` on its application without waiting. False if the
    /// application is down or its queue is full.
    pub fn dispatch(&self, action: AppAction) -> bool {
        self.inner.enqueue(action, None)
    }

    /// A handle that queues actions from other threads.
    pub fn dispatcher(&self) -> Dispatcher {
        Dispatcher(Arc::clone(&self.inner))
    }

    /// Performs a targeted action and waits up to `timeout` for it.
    pub fn trigger(&self, action: &TriggerAction, timeout: Duration) -> TriggerOutcome {
        let started = Instant::now();
        let (tx, rx) = mpsc::channel();
        self.inner.controller.set_active_trigger(Some(action.name()));
        let queued = self.inner.enqueue(AppAction::from(action), Some(tx));
        let (ok, detail) = if !queued {
            (false, "application unavailable".to_string())
        } else {
            match rx.recv_timeout(timeout) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(code)) => (false, code),
                Err(RecvTimeoutError::Timeout) => (false, "timed out".into()),
                Err(RecvTimeoutError::Disconnected) => (false, "application died".into()),
            }
        };
        self.inner.controller.set_active_trigger(None);
        TriggerOutcome {
            action: action.to_string(),
            ok,
            detail,
            latency_ms: started.elapsed().as_millis() as u64,
        }
    }

    /// Tears the stack down and starts a fresh one in the same run
    /// directory with pristine state and an empty log.
    pub fn reset(mut self, controller: Arc<Controller>, timeout: Duration) -> io::Result<(Stack, StopReport)> {
        let report = self.stop(timeout);
        let cfg = self.inner.cfg.clone();
        let dir = self.inner.run_dir.clone();
        drop(self);
        let _ = fs::remove_dir_all(dir.join("state"));
        Ok((Stack::start(&dir, cfg, controller)?, report))
    }

    /// Stops every process and proxy, waiting up to `timeout` for threads.
    pub fn stop(&mut self, timeout: Duration) -> StopReport {
        if self.stopped {
            return StopReport { forced: 0 };
        }
        self.inner.init_log(Severity::I, "shutting down");
        self.stopped = true;
        self.inner.stop.store(true, Ordering::SeqCst);
        for p in &mut self.proxies {
            p.stop();
        }
        let workers: Vec<JoinHandle<()>> = std::mem::take(&mut *self.inner.workers.lock().unwrap());
        let (tx, rx) = mpsc::channel();
        let total = workers.len();
        let waiter = thread::spawn(move || {
            for w in workers {
                let _ = w.join();
                let _ = tx.send(());
            }
        });
        let until = Instant::now() + timeout;
        let mut joined = 0;
        while joined < total {
            let left = until.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(()) => joined += 1,
                Err(_) => break,
            }
        }
        if joined == total {
            let _ = waiter.join();
        }
        for ch in self.inner.cfg.topology.channels() {
            let _ = fs::remove_file(self.inner.socket(&ch.name));
        }
        let forced = total - joined;
        if forced > 0 {
            self.inner
                .log
                .push(1, 1, Severity::W, "init", &format!("forced kill: {forced} threads did not stop"));
        }
        StopReport { forced }
    }
}

impl Drop for Stack {
    fn drop(&mut self) {
        self.stop(Duration::from_secs(5));
    }
}

fn start_process(inner: &Arc<Inner>, proc: &Arc<SimProc>) {
    let pid = inner.next_pid.fetch_add(17, Ordering::SeqCst);
    let ctx = {
        let _g = inner.log.lock();
        proc.pid.store(pid, Ordering::SeqCst);
        let generation = proc.generation.fetch_add(1, Ordering::SeqCst) + 1;
        proc.frozen.store(false, Ordering::SeqCst);
        proc.next_tid.store(0, Ordering::SeqCst);
        proc.alive.store(true, Ordering::SeqCst);
        Ctx {
            inner: Arc::clone(inner),
            proc: Arc::clone(proc),
            generation,
            pid,
            tid: pid,
        }
    };
    *proc.died_at.lock().unwrap() = None;
    inner.init_log(Severity::I, &format!("starting service '{}' (pid {pid})", proc.name()));
    for s in &proc.spec.services {
        if start_listener(&ctx, s).is_err() {
            ctx.log(Severity::E, ctx.name(), &format!("cannot bind {s}"));
            ctx.crash("bind", "EADDRINUSE");
            return;
        }
    }
    ctx.thread("lifecycle", lifecycle);
    if proc.spec.services.iter().any(|s| s == "activity-manager") {
        ctx.thread("watchdog", watchdog);
    }
    if proc.spec.services.iter().any(|s| s == "rild-socket") {
        inner.modem.last_creg.store(0, Ordering::SeqCst);
        ctx.thread("modem", modem_reader);
    }
    if proc.spec.kind == ProcessKind::App {
        let (tx, rx) = mpsc::sync_channel(QUEUE_DEPTH);
        proc.app.heartbeat.store(now_ms(), Ordering::SeqCst);
        proc.app.anr_at.store(NO_EPISODE, Ordering::SeqCst);
        *proc.app.queue.lock().unwrap() = Some(tx);
        ctx.thread("main", move |c| main_loop(c, rx));
    }
    ctx.log(Severity::I, tag_of(proc.spec.kind, proc.name()), "started");
}

fn supervise(inner: &Arc<Inner>) {
    while !inner.stopped() {
        for p in inner.procs.values() {
            if p.alive.load(Ordering::SeqCst) || p.gave_up.load(Ordering::SeqCst) {
                continue;
            }
            let due = p
                .died_at
                .lock()
                .unwrap()
                .is_some_and(|t| t.elapsed() >= Duration::from_millis(p.spec.backoff_ms));
            if !due {
                continue;
            }
            if p.restarts.load(Ordering::SeqCst) >= p.spec.max_restarts {
                p.gave_up.store(true, Ordering::SeqCst);
                inner.init_log(Severity::W, &format!("service '{}' exceeded its restart limit", p.name()));
                continue;
            }
            p.restarts.fetch_add(1, Ordering::SeqCst);
            if p.spec.kind == ProcessKind::App {
                if let Some(code) = spawn_denied(inner) {
                    inner.log.push(1, 1, Severity::E, "ActivityManager", &format!("Unable to start process {}: {code}", p.name()));
                    *p.died_at.lock().unwrap() = Some(Instant::now());
                    continue;
                }
            }
            inner.init_log(Severity::I, &format!("restarting service '{}'", p.name()));
            start_process(inner, p);
        }
        thread::sleep(Duration::from_millis(50));
    }
}

/// Consults the process-spawn point of the activity manager's host.
fn spawn_denied(inner: &Inner) -> Option<String> {
    let host = inner.cfg.topology.host_of("activity-manager")?;
    match inner.registry.call(&format!("{}.spawn", host.name), None, b"") {
        Some(CallVerdict::Fail(code)) => Some(code.as_str().to_string()),
        Some(CallVerdict::Drop | CallVerdict::Stall) => Some("EAGAIN".into()),
        _ => None,
    }
}

fn lifecycle(ctx: Ctx) {
    let point = format!("{}.lifecycle", ctx.name());
    while ctx.sleep(100) {
        match ctx.inner.registry.call(&point, None, b"") {
            Some(CallVerdict::Fail(_)) => {
                ctx.segfault();
                return;
            }
            Some(CallVerdict::Stall) => {
                ctx.proc.frozen.store(true, Ordering::SeqCst);
                ctx.hold();
                return;
            }
            Some(CallVerdict::Delay { ms }) => {
                ctx.proc.frozen.store(true, Ordering::SeqCst);
                ctx.sleep(ms);
                ctx.proc.frozen.store(false, Ordering::SeqCst);
            }
            _ => {}
        }
    }
}

fn start_listener(ctx: &Ctx, service: &str) -> io::Result<()> {
    let listener = bind(&ctx.inner.socket(service))?;
    let service = service.to_string();
    ctx.thread(&format!("svc-{service}"), move |c| {
        let alive = c.clone();
        accept_loop(&listener, &move || alive.current(), |stream| {
            let svc = service.clone();
            c.thread("binder", move |c| {
                if svc == "ttyS1" {
                    serve_modem_device(c, stream)
                } else {
                    serve_conn(c, &svc, stream)
                }
            });
        });
    });
    Ok(())
}

fn serve_conn(ctx: Ctx, service: &str, stream: UnixStream) {
    let Ok(mut write) = stream.try_clone() else { return };
    let Ok(mut reader) = MessageReader::new(stream, Framing::Sirf) else { return };
    let stop = {
        let c = ctx.clone();
        move || !c.current()
    };
    while let Ok(Some(raw)) = reader.next(&stop) {
        let Ok(req) = decode(&raw) else { break };
        if !ctx.wait_thawed() {
            break;
        }
        ctx.log(Severity::D, &service_tag(service), &op_name(service, req.code));
        let reply = match dispatch(&ctx, service, &req) {
            Ok(mut t) => {
                t.code = req.code;
                t.flags = FLAG_REPLY;
                t
            }
            Err(Fault::Reply(code)) => error_frame(req.code, &code),
            Err(Fault::Internal { code, provider }) => {
                let what = format!("{service}.{}", op_name(service, req.code));
                match ctx.on_fault(&what, &code, provider.as_deref()) {
                    Some(c) => error_frame(req.code, &c),
                    None => break,
                }
            }
        };
        if !ctx.current() {
            break;
        }
        let Ok(bytes) = encode(&reply) else { break };
        if write_all(&mut write, &bytes).is_err() {
            break;
        }
    }
}

fn op_name(service: &str, code: u32) -> String {
    crate::topology::op_name(service, code).map_or_else(|| format!("code{code}"), str::to_string)
}

fn code_of(service: &str, op: &str) -> u32 {
    op_code(service, op).expect("catalogued operation")
}

fn dispatch(ctx: &Ctx, service: &str, req: &Transaction) -> Result<Transaction, Fault> {
    let op = op_name(service, req.code);
    match (service, op.as_str()) {
        ("video0", "read") => Ok(Transaction::new(0).with(1, Value::Blob((0..PICTURE_LEN).map(|i| (i % 251) as u8).collect()))),
        ("sensor_hub", "read") => {
            let t = now_ms() % 1000;
            let jitter = (t as f64) / 10_000.0;
            Ok(Transaction::new(0)
                .with(1, Value::Float64(0.12 + jitter))
                .with(2, Value::Float64(9.81))
                .with(3, Value::Float64(0.05 - jitter)))
        }
        ("activity-manager", "start_activity") => {
            let host = ctx.name().to_string();
            match ctx.consult(&format!("{host}.spawn"), None, b"") {
                Consult::Fail(code) => Err(internal(code, None)),
                Consult::Proceed(_) => Ok(Transaction::new(0).with(1, Value::Int32(0))),
            }
        }
        ("activity-manager", "stop_activity") => Ok(Transaction::new(0).with(1, Value::Int32(0))),
        ("activity-manager", "show_activities") => {
            let apps: Vec<&str> = ctx
                .inner
                .procs
                .values()
                .filter(|p| p.spec.kind == ProcessKind::App && p.alive.load(Ordering::SeqCst))
                .map(|p| p.name())
                .collect();
            Ok(Transaction::new(0).with(1, Value::Utf8String(apps.join(","))))
        }
        ("package-manager", "get_package") => {
            ctx.malloc()?;
            let name = req
                .field(1)
                .and_then(Value::as_str)
                .ok_or_else(|| Fault::Reply("BAD_REQUEST".into()))?;
            let db = read_packages(ctx)?;
            db.get(name)
                .map(|v| Transaction::new(0).with(1, Value::Utf8String(v.clone())))
                .ok_or_else(|| Fault::Reply("NOT_FOUND".into()))
        }
        ("sensors-service", "read_sensor") => {
            ctx.malloc()?;
            let r = ctx
                .call("sensor_hub", &Transaction::new(code_of("sensor_hub", "read")), ctx.inner.cfg.service_call_timeout_ms)
                .map_err(|e| Fault::from((e, "sensor_hub")))?;
            let mut out = Transaction::new(0);
            for tag in 1..=3 {
                match r.field(tag) {
                    Some(Value::Float64(v)) if v.abs() <= SENSOR_LIMIT => out = out.with(tag, Value::Float64(*v)),
                    _ => return Err(internal("SENSOR_OUT_OF_RANGE", Some("sensor_hub"))),
                }
            }
            Ok(out)
        }
        ("camera-service", "open") => {
            ctx.malloc()?;
            Ok(Transaction::new(0).with(1, Value::Int32(0)))
        }
        ("camera-service", "take_picture") => {
            ctx.malloc()?;
            let r = ctx
                .call("video0", &Transaction::new(code_of("video0", "read")), ctx.inner.cfg.service_call_timeout_ms)
                .map_err(|e| Fault::from((e, "video0")))?;
            let frame = match r.field(1) {
                Some(Value::Blob(b)) if b.len() == PICTURE_LEN => b.clone(),
                _ => return Err(internal("BAD_FRAME", Some("video0"))),
            };
            Ok(Transaction::new(0)
                .with(1, Value::Blob(frame))
                .with(2, Value::Utf8String(CAMERA_PARAMS[0].into()))
                .with(3, Value::Int32(640))
                .with(4, Value::Int32(480)))
        }
        ("camera-service", "set_parameters") => {
            ctx.malloc()?;
            match req.field(1).and_then(Value::as_str) {
                Some(p) if CAMERA_PARAMS.contains(&p) => Ok(Transaction::new(0).with(1, Value::Int32(0))),
                _ => Err(Fault::Reply("BAD_VALUE".into())),
            }
        }
        ("rild-socket", "dial") => {
            ctx.malloc()?;
            let number = req
                .field(1)
                .and_then(Value::as_str)
                .ok_or_else(|| Fault::Reply("BAD_REQUEST".into()))?;
            if !registered(ctx) {
                return Err(Fault::Reply("NO_SERVICE".into()));
            }
            modem_command(ctx, &format!("ATD{number};"))
        }
        ("rild-socket", "hangup") => {
            ctx.malloc()?;
            modem_command(ctx, "ATH")
        }
        ("rild-socket", "get_registration") => {
            ctx.malloc()?;
            Ok(Transaction::new(0).with(1, Value::Int32(i32::from(registered(ctx)))))
        }
        _ => Err(Fault::Reply("UNKNOWN_TRANSACTION".into())),
    }
}

fn read_packages(ctx: &Ctx) -> Result<BTreeMap<String, String>, Fault> {
    let path = ctx.inner.state_file();
    let bytes = fs::read(&path).map_err(|_| internal("ENOENT", None))?;
    let point = format!("{}.file.packages-db", ctx.name());
    let bytes = match ctx.consult(&point, Some("/data/system/packages.db"), &bytes) {
        Consult::Fail(code) => return Err(internal(code, None)),
        Consult::Proceed(Some(replaced)) => replaced,
        Consult::Proceed(None) => bytes,
    };
    let text = String::from_utf8(bytes).map_err(|_| internal("CORRUPT_DB", None))?;
    let mut db = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| internal("CORRUPT_DB", None))?;
        if k.is_empty() || v.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_') {
            return Err(internal("CORRUPT_DB", None));
        }
        db.insert(k.to_string(), v.to_string());
    }
    Ok(db)
}

const CREG_PERIOD_MS: u64 = 500;
const REGISTRATION_WINDOW_MS: u64 = 2_000;
const MODEM_REPLY_MS: u64 = 1_000;

fn registered(ctx: &Ctx) -> bool {
    now_ms().saturating_sub(ctx.inner.modem.last_creg.load(Ordering::SeqCst)) < REGISTRATION_WINDOW_MS
}

/// Sends a command line to the modem and waits for its result code.
fn modem_command(ctx: &Ctx, line: &str) -> Result<Transaction, Fault> {
    let modem = &ctx.inner.modem;
    let _serial = modem.command.lock().unwrap();
    let link = match &*modem.link.lock().unwrap() {
        Some((g, s)) if *g == ctx.generation => Arc::clone(s),
        _ => return Err(Fault::Reply("RADIO_NOT_AVAILABLE".into())),
    };
    let (tx, rx) = mpsc::channel();
    *modem.pending.lock().unwrap() = Some(tx);
    if write_all(&mut link.lock().unwrap(), format!("{line}\r\n").as_bytes()).is_err() {
        return Err(Fault::Reply("RADIO_NOT_AVAILABLE".into()));
    }
    let reply = rx.recv_timeout(Duration::from_millis(MODEM_REPLY_MS));
    *modem.pending.lock().unwrap() = None;
    match reply {
        Ok(m) if m.code == "OK" => Ok(Transaction::new(0).with(1, Value::Int32(0))),
        Ok(m) => Err(Fault::Reply(format!("MODEM_{}", m.code.replace(' ', "_").trim_start_matches('+')))),
        Err(_) => Err(Fault::Reply("RADIO_NOT_AVAILABLE".into())),
    }
}

/// rild's side of the serial link: tracks registration and routes result
/// codes to the pending command.
fn modem_reader(ctx: Ctx) {
    while ctx.current() {
        let stream = match UnixStream::connect(ctx.inner.endpoint("ttyS1")) {
            Ok(s) => s,
            Err(_) => {
                if ctx.on_fault("modem.open", "ENODEV", None).is_none() || !ctx.sleep(500) {
                    return;
                }
                continue;
            }
        };
        let (Ok(write), Ok(mut reader)) = (stream.try_clone(), MessageReader::new(stream, Framing::AtLines)) else {
            return;
        };
        *ctx.inner.modem.link.lock().unwrap() = Some((ctx.generation, Arc::new(Mutex::new(write))));
        let stop = {
            let c = ctx.clone();
            move || !c.current()
        };
        let mut lost = "MODEM_LINK_DOWN".to_string();
        while let Ok(Some(raw)) = reader.next(&stop) {
            let text = String::from_utf8_lossy(&raw);
            let msg = match decode_at(&text) {
                Ok(m) => m,
                Err(e) => {
                    if ctx.on_fault("modem.read", &format!("MALFORMED_AT ({e})"), None).is_none() {
                        return;
                    }
                    continue;
                }
            };
            match msg.kind {
                AtKind::Event if msg.code == "+CREG" => {
                    let stat = msg.params.last().map(String::as_str);
                    match stat.and_then(|s| s.parse::<u8>().ok()) {
                        Some(1) | Some(5) => ctx.inner.modem.last_creg.store(now_ms(), Ordering::SeqCst),
                        Some(0..=4) => {}
                        _ => {
                            if ctx.on_fault("modem.creg", "BAD_REGISTRATION_STATE", None).is_none() {
                                return;
                            }
                        }
                    }
                }
                AtKind::Response if msg.code == "+CME ERROR" && ctx.inner.modem.pending.lock().unwrap().is_none() => {
                    lost = msg.params.first().cloned().unwrap_or_else(|| "EIO".into());
                }
                AtKind::Response => {
                    if let Some(tx) = ctx.inner.modem.pending.lock().unwrap().take() {
                        let _ = tx.send(msg);
                    }
                }
                _ => {}
            }
        }
        *ctx.inner.modem.link.lock().unwrap() = None;
        if !ctx.current() {
            return;
        }
        if ctx.on_fault("modem.link", &lost, Some("ttyS1")).is_none() || !ctx.sleep(500) {
            return;
        }
    }
}

/// The kernel's serial modem: periodic unsolicited events plus answers
/// to commands.
fn serve_modem_device(ctx: Ctx, stream: UnixStream) {
    let (Ok(write), Ok(mut reader)) = (stream.try_clone(), MessageReader::new(stream, Framing::AtLines)) else {
        return;
    };
    let write = Arc::new(Mutex::new(write));
    let open = Arc::new(AtomicBool::new(true));
    {
        let (write, open) = (Arc::clone(&write), Arc::clone(&open));
        ctx.thread("modem-urc", move |c| {
            let mut tick = 0u64;
            while open.load(Ordering::SeqCst) && c.sleep(CREG_PERIOD_MS) {
                tick += 1;
                let mut line = "+CREG: 0,1\r\n".to_string();
                if tick.is_multiple_of(2) {
                    line.push_str("+CSQ: 20,99\r\n");
                }
                if tick.is_multiple_of(8) {
                    line.push_str("RING\r\n");
                }
                if write_all(&mut write.lock().unwrap(), line.as_bytes()).is_err() {
                    break;
                }
            }
        });
    }
    let stop = {
        let c = ctx.clone();
        move || !c.current()
    };
    while let Ok(Some(raw)) = reader.next(&stop) {
        let reply = match decode_at(&String::from_utf8_lossy(&raw)) {
            Ok(m) if m.kind == AtKind::Command => match m.code.as_str() {
                c if c.starts_with('D') && c.len() > 1 => "OK\r\n+CLCC: 1,0,2,0,0\r\n".to_string(),
                "H" | "+CHUP" | "E0" | "" => "OK\r\n".to_string(),
                "+CREG?" => "+CREG: 0,1\r\nOK\r\n".to_string(),
                _ => "ERROR\r\n".to_string(),
            },
            _ => "ERROR\r\n".to_string(),
        };
        if write_all(&mut write.lock().unwrap(), reply.as_bytes()).is_err() {
            break;
        }
    }
    open.store(false, Ordering::SeqCst);
}

fn watchdog(ctx: Ctx) {
    let threshold = ctx.inner.cfg.anr_threshold_ms;
    while ctx.sleep(100) {
        if ctx.proc.frozen.load(Ordering::SeqCst) {
            continue;
        }
        for p in ctx.inner.procs.values() {
            if p.spec.kind != ProcessKind::App || !p.alive.load(Ordering::SeqCst) {
                continue;
            }
            let hb = p.app.heartbeat.load(Ordering::SeqCst);
            if now_ms().saturating_sub(hb) > threshold && p.app.anr_at.swap(hb, Ordering::SeqCst) != hb {
                ctx.log(
                    Severity::E,
                    "ActivityManager",
                    &format!("ANR in {} (pid {})", p.name(), p.pid.load(Ordering::SeqCst)),
                );
                ctx.log(Severity::E, "ActivityManager", "Reason: Input dispatching timed out");
            }
        }
    }
}

fn main_loop(ctx: Ctx, rx: Receiver<Task>) {
    let beat = |c: &Ctx| c.proc.app.heartbeat.store(now_ms(), Ordering::SeqCst);
    while ctx.wait_thawed() {
        beat(&ctx);
        match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(task) => {
                let result = run_action(&ctx, &task.action);
                if !ctx.current() {
                    return;
                }
                beat(&ctx);
                if let Some(done) = task.done {
                    let _ = done.send(result);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

/// Runs an action; errors go through the application's handler.
fn run_action(ctx: &Ctx, action: &AppAction) -> Result<String, String> {
    match perform(ctx, action) {
        Ok(s) => Ok(s),
        Err((code, provider)) => match ctx.on_fault(action.name(), &code, Some(provider)) {
            Some(c) => Err(c),
            None => Err(code),
        },
    }
}

type AppError = (String, &'static str);

fn perform(ctx: &Ctx, action: &AppAction) -> Result<String, AppError> {
    let timeout = ctx.inner.cfg.app_call_timeout_ms;
    let call = |service: &'static str, op: &str, t: Transaction| -> Result<Transaction, AppError> {
        let mut t = t;
        t.code = code_of(service, op);
        ctx.call(service, &t, timeout).map_err(|e| (e.code(), service))
    };
    let bad = |what: &str, service: &'static str| Err((format!("BAD_REPLY ({what})"), service));
    match action {
        AppAction::TakePicture => {
            call("camera-service", "open", Transaction::new(0))?;
            let r = call("camera-service", "take_picture", Transaction::new(0))?;
            let blob_ok = matches!(r.field(1), Some(Value::Blob(b)) if b.len() == PICTURE_LEN);
            let params_ok = r.field(2).and_then(Value::as_str).is_some_and(|p| CAMERA_PARAMS.contains(&p));
            let size_ok = r.field(3) == Some(&Value::Int32(640)) && r.field(4) == Some(&Value::Int32(480));
            if blob_ok && params_ok && size_ok {
                Ok("picture 640x480".into())
            } else {
                bad("picture", "camera-service")
            }
        }
        AppAction::ShowActivities => {
            let r = call("activity-manager", "show_activities", Transaction::new(0))?;
            match r.field(1).and_then(Value::as_str) {
                Some(s) => Ok(s.to_string()),
                None => bad("activities", "activity-manager"),
            }
        }
        AppAction::StopActivity => {
            let t = Transaction::new(0).with(1, Value::Utf8String(ctx.name().into()));
            let r = call("activity-manager", "stop_activity", t)?;
            match r.field(1) {
                Some(Value::Int32(0)) => Ok("stopped".into()),
                _ => bad("stop", "activity-manager"),
            }
        }
        AppAction::Dial(number) => {
            let t = Transaction::new(0).with(1, Value::Utf8String(number.clone()));
            let r = call("rild-socket", "dial", t)?;
            match r.field(1) {
                Some(Value::Int32(0)) => Ok(format!("dialing {number}")),
                _ => bad("dial", "rild-socket"),
            }
        }
        AppAction::ReadSensor => {
            let r = call("sensors-service", "read_sensor", Transaction::new(0))?;
            let values: Option<Vec<f64>> = (1..=3)
                .map(|tag| match r.field(tag) {
                    Some(Value::Float64(v)) if v.abs() <= SENSOR_LIMIT => Some(*v),
                    _ => None,
                })
                .collect();
            match values {
                Some(v) => Ok(format!("{:.2},{:.2},{:.2}", v[0], v[1], v[2])),
                None => bad("sensor", "sensors-service"),
            }
        }
        AppAction::GetPackage => {
            let t = Transaction::new(0).with(1, Value::Utf8String("com.example.phone".into()));
            let r = call("package-manager", "get_package", t)?;
            match r.field(1).and_then(Value::as_str) {
                Some(v) if !v.is_empty() => Ok(v.to_string()),
                _ => bad("package", "package-manager"),
            }
        }
        AppAction::GetRegistration => {
            let r = call("rild-socket", "get_registration", Transaction::new(0))?;
            match r.field(1) {
                Some(Value::Int32(s @ (0 | 1))) => Ok(format!("registered={s}")),
                _ => bad("registration", "rild-socket"),
            }
        }
    }
}
