//! Transparent interposition on a local stream channel.
//!
//! The proxy listens where clients connect, opens one upstream connection
//! per client connection and relays messages both ways. Every message goes
//! through the controller; messages it lets pass are forwarded
//! byte-for-byte.

use std::collections::BTreeMap;
use std::io;
use std::net::Shutdown;
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use sirfit_core::inject::{CallVerdict, Controller, Direction, FrameVerdict};
use sirfit_core::wire::{
    at_to_transaction, decode, decode_at, encode, AtKind, Transaction, Value, AT_CODE_TAG,
};

use crate::net::{accept_loop, bind, write_all, Framing, MessageReader};

/// What the proxy knows about the channel it sits on.
#[derive(Debug, Clone)]
pub struct ChannelInfo {
    pub name: String,
    pub framing: Framing,
    /// Operation names by message code, for SIRF channels.
    pub operations: BTreeMap<u32, String>,
    /// Path reported to path filters, e.g. `/dev/video0`.
    pub path_hint: String,
    /// Injection point consulted when a client connects.
    pub open_point: String,
}

impl ChannelInfo {
    /// Point of a SIRF message with `code`: `<channel>.<operation>`.
    pub fn operation_point(&self, code: u32) -> String {
        match self.operations.get(&code) {
            Some(op) => format!("{}.{op}", self.name),
            None => format!("{}.code{code}", self.name),
        }
    }

    /// Point of an AT line: `<channel>.write` toward the device,
    /// `<channel>.read` from it.
    pub fn line_point(&self, direction: Direction) -> String {
        match direction {
            Direction::Request => format!("{}.write", self.name),
            Direction::Reply => format!("{}.read", self.name),
        }
    }
}

#[derive(Debug, Default)]
pub struct ProxyStats {
    pub connections: AtomicU64,
    pub messages: AtomicU64,
}

pub struct ProxyHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    pub stats: Arc<ProxyStats>,
    pub listen: PathBuf,
}

impl ProxyHandle {
    /// Stops accepting, releases stalled messages and closes every relayed
    /// connection.
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.listen);
    }
}

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts relaying from `listen` to `upstream`.
pub fn attach_proxy(
    listen: &Path,
    upstream: &Path,
    channel: ChannelInfo,
    controller: Arc<Controller>,
) -> io::Result<ProxyHandle> {
    let listener = bind(listen)?;
    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(ProxyStats::default());
    let relay = Arc::new(Relay {
        upstream: upstream.to_path_buf(),
        channel,
        controller,
        stop: Arc::clone(&stop),
        stats: Arc::clone(&stats),
    });
    let thread = thread::Builder::new()
        .name(format!("proxy-{}", relay.channel.name))
        .spawn(move || {
            let mut workers: Vec<JoinHandle<()>> = Vec::new();
            accept_loop(&listener, &|| !relay.stop.load(Ordering::SeqCst), |client| {
                relay.stats.connections.fetch_add(1, Ordering::Relaxed);
                let r = Arc::clone(&relay);
                workers.retain(|w| !w.is_finished());
                if let Ok(w) = thread::Builder::new()
                    .name("proxy-conn".into())
                    .spawn(move || r.serve(client))
                {
                    workers.push(w);
                }
            });
            for w in workers {
                let _ = w.join();
            }
        })?;
    Ok(ProxyHandle {
        stop,
        thread: Some(thread),
        stats,
        listen: listen.to_path_buf(),
    })
}

struct Relay {
    upstream: PathBuf,
    channel: ChannelInfo,
    controller: Arc<Controller>,
    stop: Arc<AtomicBool>,
    stats: Arc<ProxyStats>,
}

type Sink = Arc<Mutex<UnixStream>>;

impl Relay {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn sleep(&self, ms: u64) {
        let until = Instant::now() + Duration::from_millis(ms);
        while !self.stopped() && Instant::now() < until {
            thread::sleep(crate::net::POLL);
        }
    }

    fn hold(&self) {
        while !self.stopped() {
            thread::sleep(crate::net::POLL);
        }
    }

    fn error_message(&self, code: &str, request: Option<&[u8]>) -> Vec<u8> {
        match self.channel.framing {
            Framing::Sirf => {
                let req_code = request.and_then(|r| decode(r).ok()).map_or(0, |t| t.code);
                encode(&sirfit_core::wire::error_frame(req_code, code)).expect("error frame encodes")
            }
            Framing::AtLines => format!("+CME ERROR: {code}\r\n").into_bytes(),
        }
    }

    fn serve(self: Arc<Self>, client: UnixStream) {
        let verdict = self
            .controller
            .intercept_call(&self.channel.open_point, Some(&self.channel.path_hint), b"")
            .ok()
            .flatten();
        match verdict {
            Some(CallVerdict::Fail(code)) => {
                self.refuse(client, code.as_str());
                return;
            }
            Some(CallVerdict::Stall) => {
                self.hold();
                return;
            }
            Some(CallVerdict::Delay { ms }) => self.sleep(ms),
            Some(CallVerdict::Drop) => return,
            _ => {}
        }
        let Ok(upstream) = UnixStream::connect(&self.upstream) else {
            return;
        };
        let (Ok(client_read), Ok(upstream_read)) = (client.try_clone(), upstream.try_clone()) else {
            return;
        };
        let to_client: Sink = Arc::new(Mutex::new(client));
        let to_upstream: Sink = Arc::new(Mutex::new(upstream));
        let back = {
            let me = Arc::clone(&self);
            let (src, dst, other) = (upstream_read, Arc::clone(&to_client), Arc::clone(&to_upstream));
            thread::spawn(move || me.pump(src, Direction::Reply, dst, &other))
        };
        self.pump(client_read, Direction::Request, Arc::clone(&to_upstream), &to_client);
        let _ = back.join();
    }

    /// Answers the first message of a refused connection with an error.
    fn refuse(&self, client: UnixStream, code: &str) {
        let Ok(write) = client.try_clone() else { return };
        let mut write = write;
        let first = match self.channel.framing {
            Framing::Sirf => MessageReader::new(client, Framing::Sirf)
                .ok()
                .and_then(|mut r| {
                    r.next_until(Some(Instant::now() + Duration::from_secs(2)), &|| self.stopped())
                        .ok()
                        .flatten()
                }),
            Framing::AtLines => None,
        };
        let _ = write_all(&mut write, &self.error_message(code, first.as_deref()));
        let _ = write.shutdown(Shutdown::Both);
    }

    /// Relays one direction until either side closes. `forward` receives
    /// passed messages; `client` receives error answers.
    fn pump(&self, src: UnixStream, direction: Direction, forward: Sink, client: &Sink) {
        let client_side = if direction == Direction::Request { client } else { &forward };
        if let Ok(mut reader) = MessageReader::new(src, self.channel.framing) {
            while let Ok(Some(raw)) = reader.next(&|| self.stopped()) {
                self.stats.messages.fetch_add(1, Ordering::Relaxed);
                let out = self.process(&raw, direction);
                let ok = match out {
                    Out::Forward(bytes) => write_all(&mut forward.lock().unwrap(), &bytes).is_ok(),
                    Out::Answer(bytes) => write_all(&mut client_side.lock().unwrap(), &bytes).is_ok(),
                    Out::Nothing => true,
                    Out::Hold => {
                        self.hold();
                        false
                    }
                };
                if !ok {
                    break;
                }
            }
        }
        for s in [&forward, client] {
            let _ = s.lock().unwrap().shutdown(Shutdown::Both);
        }
    }

    fn process(&self, raw: &[u8], direction: Direction) -> Out {
        match self.channel.framing {
            Framing::Sirf => {
                let Ok(t) = decode(raw) else {
                    return Out::Forward(raw.to_vec());
                };
                let point = self.channel.operation_point(t.code);
                self.verdict(&point, direction, raw, &t, |t| encode(t).unwrap_or_else(|_| raw.to_vec()))
            }
            Framing::AtLines => {
                let text = String::from_utf8_lossy(raw);
                let Ok(msg) = decode_at(&text) else {
                    return Out::Forward(raw.to_vec());
                };
                let point = self.channel.line_point(direction);
                self.verdict(&point, direction, raw, &at_to_transaction(&msg), render_line)
            }
        }
    }

    fn verdict(
        &self,
        point: &str,
        direction: Direction,
        raw: &[u8],
        t: &Transaction,
        render: impl Fn(&Transaction) -> Vec<u8>,
    ) -> Out {
        match self
            .controller
            .intercept_frame(point, direction, Some(&self.channel.path_hint), raw, t)
        {
            Ok(None) | Err(_) => Out::Forward(raw.to_vec()),
            Ok(Some(FrameVerdict::Forward(t2))) => Out::Forward(render(&t2)),
            Ok(Some(FrameVerdict::Respond(err))) => {
                let code = err.error_code().unwrap_or("SERVICE_ERROR").to_string();
                Out::Answer(self.error_message(&code, Some(raw)))
            }
            Ok(Some(FrameVerdict::Delay { ms })) => {
                self.sleep(ms);
                Out::Forward(raw.to_vec())
            }
            Ok(Some(FrameVerdict::Stall)) => Out::Hold,
            Ok(Some(FrameVerdict::Drop)) => Out::Nothing,
        }
    }
}

enum Out {
    Forward(Vec<u8>),
    Answer(Vec<u8>),
    Nothing,
    Hold,
}

/// Renders the transaction view of an AT line back to text without
/// validating it, so corrupted lines still reach the receiver.
fn render_line(t: &Transaction) -> Vec<u8> {
    let text = |v: &Value| match v {
        Value::Utf8String(s) => s.clone(),
        other => other.to_string(),
    };
    let code = t.field(AT_CODE_TAG).map(text).unwrap_or_default();
    let params: Vec<String> = t
        .fields
        .iter()
        .filter(|f| f.tag != AT_CODE_TAG)
        .map(|f| text(&f.value))
        .collect();
    let kind = if t.code == 0 { AtKind::Command } else { AtKind::Event };
    let line = match (kind, params.is_empty()) {
        (AtKind::Command, true) => format!("AT{code}"),
        (AtKind::Command, false) => format!("AT{code}={}", params.join(",")),
        (_, true) => code,
        (_, false) => format!("{code}: {}", params.join(",")),
    };
    format!("{line}\r\n").into_bytes()
}
