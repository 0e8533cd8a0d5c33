//! Local stream sockets: message framing with stop-aware reads, listeners
//! and the request/reply client.

use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use sirfit_core::wire::{decode, encode, frame_length, Transaction};
use thiserror::Error;

/// How often blocked operations re-check their stop condition.
pub const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Framing {
    /// Binary SIRF transaction frames.
    Sirf,
    /// Newline-terminated AT lines.
    AtLines,
}

/// Buffered reader yielding whole messages.
pub struct MessageReader {
    stream: UnixStream,
    buf: Vec<u8>,
    framing: Framing,
}

impl MessageReader {
    pub fn new(stream: UnixStream, framing: Framing) -> io::Result<MessageReader> {
        stream.set_read_timeout(Some(POLL))?;
        Ok(MessageReader {
            stream,
            buf: Vec::new(),
            framing,
        })
    }

    fn take_message(&mut self) -> io::Result<Option<Vec<u8>>> {
        let len = match self.framing {
            Framing::Sirf => frame_length(&self.buf)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
            Framing::AtLines => self.buf.iter().position(|&b| b == b'\n').map(|p| p + 1),
        };
        Ok(len.map(|n| self.buf.drain(..n).collect()))
    }

    /// Next message, or `None` at end of stream or once `stop` holds.
    pub fn next(&mut self, stop: &dyn Fn() -> bool) -> io::Result<Option<Vec<u8>>> {
        self.next_until(None, stop)
    }

    /// Like [`MessageReader::next`], failing with `TimedOut` at `deadline`.
    pub fn next_until(
        &mut self,
        deadline: Option<Instant>,
        stop: &dyn Fn() -> bool,
    ) -> io::Result<Option<Vec<u8>>> {
        let mut chunk = [0u8; 8192];
        loop {
            if let Some(m) = self.take_message()? {
                return Ok(Some(m));
            }
            if stop() {
                return Ok(None);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(io::ErrorKind::TimedOut.into());
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Ok(None),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
                    ) => {}
                Err(e) => return Err(e),
            }
        }
    }
}

/// Binds a listener at `path`, replacing a stale socket file.
pub fn bind(path: &Path) -> io::Result<UnixListener> {
    let _ = fs::remove_file(path);
    let listener = UnixListener::bind(path)?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// Accepts connections until `running` turns false. Accepted streams are
/// switched back to blocking mode.
pub fn accept_loop(listener: &UnixListener, running: &dyn Fn() -> bool, mut on_conn: impl FnMut(UnixStream)) {
    while running() {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_ok() {
                    on_conn(stream);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

pub fn write_all(stream: &mut UnixStream, bytes: &[u8]) -> io::Result<()> {
    stream.set_write_timeout(Some(Duration::from_secs(2)))?;
    stream.write_all(bytes)?;
    stream.flush()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CallError {
    /// The provider is gone: nothing listening, or the connection closed
    /// before a reply.
    #[error("DEAD_OBJECT: {0}")]
    DeadObject(String),
    /// The provider answered with an error frame.
    #[error("{0}")]
    Remote(String),
    #[error("TIMEOUT")]
    Timeout,
    #[error("malformed reply: {0}")]
    Protocol(String),
    #[error("stopped")]
    Stopped,
}

impl CallError {
    pub fn code(&self) -> String {
        match self {
            CallError::DeadObject(_) => "DEAD_OBJECT".into(),
            CallError::Remote(code) => code.clone(),
            CallError::Timeout => "TIMEOUT".into(),
            CallError::Protocol(_) => "BAD_REPLY".into(),
            CallError::Stopped => "STOPPED".into(),
        }
    }
}

/// Sends `t` over a fresh connection and waits for one reply frame.
pub fn call(path: &Path, t: &Transaction, timeout: Duration, stop: &dyn Fn() -> bool) -> Result<Transaction, CallError> {
    let mut stream = UnixStream::connect(path).map_err(|e| CallError::DeadObject(e.to_string()))?;
    let bytes = encode(t).map_err(|e| CallError::Protocol(e.to_string()))?;
    write_all(&mut stream, &bytes).map_err(|e| CallError::DeadObject(e.to_string()))?;
    let mut reader = MessageReader::new(stream, Framing::Sirf).map_err(|e| CallError::DeadObject(e.to_string()))?;
    let reply = match reader.next_until(Some(Instant::now() + timeout), stop) {
        Ok(Some(raw)) => decode(&raw).map_err(|e| CallError::Protocol(e.to_string()))?,
        Ok(None) if stop() => return Err(CallError::Stopped),
        Ok(None) => return Err(CallError::DeadObject("connection closed".into())),
        Err(e) if e.kind() == io::ErrorKind::TimedOut => return Err(CallError::Timeout),
        Err(e) => return Err(CallError::DeadObject(e.to_string())),
    };
    match reply.error_code() {
        Some(code) => Err(CallError::Remote(code.to_string())),
        None => Ok(reply),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sirfit_core::wire::Value;

    #[test]
    fn reader_splits_messages() {
        let (mut a, b) = UnixStream::pair().unwrap();
        let t = Transaction::new(1).with(1, Value::Int32(5));
        let mut bytes = encode(&t).unwrap();
        bytes.extend(encode(&t).unwrap());
        a.write_all(&bytes).unwrap();
        drop(a);
        let mut r = MessageReader::new(b, Framing::Sirf).unwrap();
        assert_eq!(decode(&r.next(&|| false).unwrap().unwrap()).unwrap(), t);
        assert_eq!(decode(&r.next(&|| false).unwrap().unwrap()).unwrap(), t);
        assert_eq!(r.next(&|| false).unwrap(), None);
    }

    #[test]
    fn lines_and_deadlines() {
        let (mut a, b) = UnixStream::pair().unwrap();
        a.write_all(b"OK\r\n+CREG: 1").unwrap();
        let mut r = MessageReader::new(b, Framing::AtLines).unwrap();
        assert_eq!(r.next(&|| false).unwrap().unwrap(), b"OK\r\n");
        let err = r
            .next_until(Some(Instant::now() + Duration::from_millis(60)), &|| false)
            .unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }
}
