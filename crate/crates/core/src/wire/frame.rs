//! The SIRF transaction frame.
//!
//! ```text
//! offset size
//! 0      4    magic "SIRF" (0x53495246, big-endian)
//! 4      1    version (0x01)
//! 5      4    code (LE)
//! 9      1    flags
//! 10     2    field count (LE)
//! 12     ...  fields: tag u16 LE, kind u8, payload length u32 LE, payload
//! ```
//!
//! There is no checksum: a corrupted frame must still reach its receiver.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Read};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SIRF";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 12;
pub const FIELD_HEADER_LEN: usize = 7;
pub const MAX_FIELDS: usize = 1024;
pub const MAX_BLOB_LEN: usize = 1 << 20;

/// Frame flag: the frame answers a request.
pub const FLAG_REPLY: u8 = 0x01;
/// Frame flag: one-way notification, no reply expected.
pub const FLAG_ONEWAY: u8 = 0x02;
/// Frame flag: the reply reports a failure (see [`error_frame`]).
pub const FLAG_ERROR: u8 = 0x80;
/// Field carrying the symbolic error code of an error frame.
pub const ERROR_TAG: u16 = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FieldKind {
    Int32 = 1,
    Int64 = 2,
    Bool = 3,
    Float64 = 4,
    Utf8String = 5,
    Blob = 6,
}

impl FieldKind {
    pub fn from_byte(b: u8) -> Option<FieldKind> {
        Some(match b {
            1 => FieldKind::Int32,
            2 => FieldKind::Int64,
            3 => FieldKind::Bool,
            4 => FieldKind::Float64,
            5 => FieldKind::Utf8String,
            6 => FieldKind::Blob,
            _ => return None,
        })
    }

    fn fixed_len(self) -> Option<usize> {
        match self {
            FieldKind::Int32 => Some(4),
            FieldKind::Int64 | FieldKind::Float64 => Some(8),
            FieldKind::Bool => Some(1),
            FieldKind::Utf8String | FieldKind::Blob => None,
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, FieldKind::Int32 | FieldKind::Int64 | FieldKind::Float64)
    }
}

#[derive(Debug, Clone)]
pub enum Value {
    Int32(i32),
    Int64(i64),
    Bool(bool),
    Float64(f64),
    Utf8String(String),
    Blob(Vec<u8>),
}

// Floats compare bitwise so that NaN payloads survive round-trip checks.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Int32(a), Value::Int32(b)) => a == b,
            (Value::Int64(a), Value::Int64(b)) => a == b,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Float64(a), Value::Float64(b)) => a.to_bits() == b.to_bits(),
            (Value::Utf8String(a), Value::Utf8String(b)) => a == b,
            (Value::Blob(a), Value::Blob(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Int32(_) => FieldKind::Int32,
            Value::Int64(_) => FieldKind::Int64,
            Value::Bool(_) => FieldKind::Bool,
            Value::Float64(_) => FieldKind::Float64,
            Value::Utf8String(_) => FieldKind::Utf8String,
            Value::Blob(_) => FieldKind::Blob,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Value::Int32(v) => v.to_le_bytes().to_vec(),
            Value::Int64(v) => v.to_le_bytes().to_vec(),
            Value::Bool(v) => vec![u8::from(*v)],
            Value::Float64(v) => v.to_bits().to_le_bytes().to_vec(),
            Value::Utf8String(s) => s.as_bytes().to_vec(),
            Value::Blob(b) => b.clone(),
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Utf8String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int32(v) => Some(i64::from(*v)),
            Value::Int64(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int32(v) => write!(f, "{v}"),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Float64(v) => write!(f, "{v}"),
            Value::Utf8String(s) => write!(f, "{s:?}"),
            Value::Blob(b) => write!(f, "<{} bytes>", b.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub tag: u16,
    pub value: Value,
}

impl Field {
    pub fn new(tag: u16, value: Value) -> Field {
        Field { tag, value }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transaction {
    pub code: u32,
    pub flags: u8,
    pub fields: Vec<Field>,
}

impl Transaction {
    pub fn new(code: u32) -> Transaction {
        Transaction {
            code,
            flags: 0,
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, tag: u16, value: Value) -> Transaction {
        self.fields.push(Field::new(tag, value));
        self
    }

    pub fn field(&self, tag: u16) -> Option<&Value> {
        self.fields.iter().find(|f| f.tag == tag).map(|f| &f.value)
    }

    pub fn is_reply(&self) -> bool {
        self.flags & FLAG_REPLY != 0
    }

    pub fn is_error(&self) -> bool {
        self.flags & FLAG_ERROR != 0
    }

    /// Symbolic error code carried by an error frame.
    pub fn error_code(&self) -> Option<&str> {
        if self.is_error() {
            self.field(ERROR_TAG).and_then(Value::as_str)
        } else {
            None
        }
    }

    pub fn check(&self) -> Result<(), EncodeError> {
        if self.fields.len() > MAX_FIELDS {
            return Err(EncodeError::TooManyFields(self.fields.len()));
        }
        let mut tags = BTreeSet::new();
        for f in &self.fields {
            if !tags.insert(f.tag) {
                return Err(EncodeError::DuplicateTag(f.tag));
            }
            if let Value::Blob(b) = &f.value {
                if b.len() > MAX_BLOB_LEN {
                    return Err(EncodeError::BlobTooLarge(f.tag, b.len()));
                }
            }
        }
        Ok(())
    }
}

/// Reply to `code` reporting failure with a symbolic error code.
pub fn error_frame(code: u32, error: &str) -> Transaction {
    Transaction {
        code,
        flags: FLAG_REPLY | FLAG_ERROR,
        fields: vec![Field::new(ERROR_TAG, Value::Utf8String(error.to_string()))],
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{0} fields exceed the limit of {MAX_FIELDS}")]
    TooManyFields(usize),
    #[error("tag {0} appears more than once")]
    DuplicateTag(u16),
    #[error("blob field {0} is {1} bytes, limit is {MAX_BLOB_LEN}")]
    BlobTooLarge(u16, usize),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated")]
    Truncated,
    #[error("invalid UTF-8 in string field")]
    InvalidUtf8,
    #[error("length overflow")]
    LengthOverflow,
    #[error("unknown field kind {0}")]
    UnknownKind(u8),
    #[error("payload length does not match field kind")]
    LengthMismatch,
    #[error("boolean payload is not 0 or 1")]
    InvalidBool,
    #[error("duplicate tag {0}")]
    DuplicateTag(u16),
    #[error("too many fields")]
    TooManyFields,
    #[error("trailing bytes after frame")]
    TrailingBytes,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("decode error at offset {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

fn err(offset: usize, kind: DecodeErrorKind) -> DecodeError {
    DecodeError { offset, kind }
}

pub fn encode(t: &Transaction) -> Result<Vec<u8>, EncodeError> {
    t.check()?;
    let mut out = Vec::with_capacity(HEADER_LEN + t.fields.len() * 16);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&t.code.to_le_bytes());
    out.push(t.flags);
    out.extend_from_slice(&(t.fields.len() as u16).to_le_bytes());
    for f in &t.fields {
        let payload = f.value.payload();
        out.extend_from_slice(&f.tag.to_le_bytes());
        out.push(f.value.kind() as u8);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

fn check_header(bytes: &[u8]) -> Result<usize, DecodeError> {
    if bytes.len() < 4 {
        return Err(err(bytes.len(), DecodeErrorKind::Truncated));
    }
    if bytes[..4] != MAGIC {
        return Err(err(0, DecodeErrorKind::BadMagic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), DecodeErrorKind::Truncated));
    }
    if bytes[4] != VERSION {
        return Err(err(4, DecodeErrorKind::UnsupportedVersion(bytes[4])));
    }
    let count = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    if count > MAX_FIELDS {
        return Err(err(10, DecodeErrorKind::TooManyFields));
    }
    Ok(count)
}

/// Validates the declared payload length of a field header at `at`.
fn payload_len(kind_byte: u8, len: u32, at: usize) -> Result<usize, DecodeError> {
    let kind =
        FieldKind::from_byte(kind_byte).ok_or(err(at + 2, DecodeErrorKind::UnknownKind(kind_byte)))?;
    let len = len as usize;
    match kind.fixed_len() {
        Some(n) if n != len => Err(err(at + 3, DecodeErrorKind::LengthMismatch)),
        None if len > MAX_BLOB_LEN => Err(err(at + 3, DecodeErrorKind::LengthOverflow)),
        _ => Ok(len),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Transaction, DecodeError> {
    let count = check_header(bytes)?;
    let code = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]);
    let flags = bytes[9];
    let mut pos = HEADER_LEN;
    let mut fields = Vec::with_capacity(count);
    let mut tags = BTreeSet::new();
    for _ in 0..count {
        let at = pos;
        if bytes.len() < at + FIELD_HEADER_LEN {
            return Err(err(bytes.len(), DecodeErrorKind::Truncated));
        }
        let tag = u16::from_le_bytes([bytes[at], bytes[at + 1]]);
        let kind_byte = bytes[at + 2];
        let len = u32::from_le_bytes([bytes[at + 3], bytes[at + 4], bytes[at + 5], bytes[at + 6]]);
        let len = payload_len(kind_byte, len, at)?;
        let start = at + FIELD_HEADER_LEN;
        let payload = bytes
            .get(start..start + len)
            .ok_or(err(bytes.len(), DecodeErrorKind::Truncated))?;
        if !tags.insert(tag) {
            return Err(err(at, DecodeErrorKind::DuplicateTag(tag)));
        }
        let value = match FieldKind::from_byte(kind_byte).expect("checked") {
            FieldKind::Int32 => Value::Int32(i32::from_le_bytes(payload.try_into().unwrap())),
            FieldKind::Int64 => Value::Int64(i64::from_le_bytes(payload.try_into().unwrap())),
            FieldKind::Float64 => {
                Value::Float64(f64::from_bits(u64::from_le_bytes(payload.try_into().unwrap())))
            }
            FieldKind::Bool => match payload[0] {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                _ => return Err(err(start, DecodeErrorKind::InvalidBool)),
            },
            FieldKind::Utf8String => Value::Utf8String(
                std::str::from_utf8(payload)
                    .map_err(|e| err(start + e.valid_up_to(), DecodeErrorKind::InvalidUtf8))?
                    .to_string(),
            ),
            FieldKind::Blob => Value::Blob(payload.to_vec()),
        };
        fields.push(Field { tag, value });
        pos = start + len;
    }
    if pos != bytes.len() {
        return Err(err(pos, DecodeErrorKind::TrailingBytes));
    }
    Ok(Transaction { code, flags, fields })
}

/// Length of the first frame in `prefix`, or `None` if more bytes are
/// needed to tell. Checks framing only, like [`read_frame`].
pub fn frame_length(prefix: &[u8]) -> Result<Option<usize>, DecodeError> {
    if prefix.len() < HEADER_LEN {
        if prefix.len() >= 4 && prefix[..4] != MAGIC {
            return Err(err(0, DecodeErrorKind::BadMagic));
        }
        return Ok(None);
    }
    let count = check_header(prefix)?;
    let mut pos = HEADER_LEN;
    for _ in 0..count {
        if prefix.len() < pos + FIELD_HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_le_bytes([prefix[pos + 3], prefix[pos + 4], prefix[pos + 5], prefix[pos + 6]]);
        pos += FIELD_HEADER_LEN + payload_len(prefix[pos + 2], len, pos)?;
    }
    Ok((prefix.len() >= pos).then_some(pos))
}

/// Reads the raw bytes of exactly one frame from a stream. Only framing is
/// checked (magic, version, lengths); field contents are left to [`decode`]
/// so that corrupted frames still travel. Returns `Ok(None)` on a clean
/// end of stream before the first byte.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut buf = vec![0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let count = check_header(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    for _ in 0..count {
        let at = buf.len();
        buf.resize(at + FIELD_HEADER_LEN, 0);
        r.read_exact(&mut buf[at..])?;
        let len = u32::from_le_bytes([buf[at + 3], buf[at + 4], buf[at + 5], buf[at + 6]]);
        let len = payload_len(buf[at + 2], len, at)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let start = buf.len();
        buf.resize(start + len, 0);
        r.read_exact(&mut buf[start..])?;
    }
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_length_waits_for_whole_frames() {
        let bytes = encode(&Transaction::new(3).with(1, Value::Utf8String("abc".into()))).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(frame_length(&bytes[..cut]).unwrap(), None, "cut {cut}");
        }
        let mut two = bytes.clone();
        two.extend_from_slice(&bytes);
        assert_eq!(frame_length(&two).unwrap(), Some(bytes.len()));
        assert!(frame_length(b"XXXXXXXXXXXX").is_err());
    }

    #[test]
    fn empty_transaction_is_header_only() {
        let bytes = encode(&Transaction::new(0)).unwrap();
        assert_eq!(
            bytes,
            vec![0x53, 0x49, 0x52, 0x46, 0x01, 0, 0, 0, 0, 0, 0, 0]
        );
        assert_eq!(decode(&bytes).unwrap(), Transaction::new(0));
    }

    #[test]
    fn int32_field_layout() {
        let t = Transaction::new(0).with(1, Value::Int32(42));
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + FIELD_HEADER_LEN + 4);
        assert_eq!(&bytes[10..12], &[1, 0]);
        assert_eq!(
            &bytes[HEADER_LEN..],
            &[1, 0, 1, 4, 0, 0, 0, 0x2A, 0x00, 0x00, 0x00]
        );
    }

    #[test]
    fn bad_magic_at_offset_zero() {
        let e = decode(&[0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]).unwrap_err();
        assert_eq!(e, err(0, DecodeErrorKind::BadMagic));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode(&Transaction::new(3)).unwrap();
        bytes[4] = 2;
        assert_eq!(
            decode(&bytes).unwrap_err().kind,
            DecodeErrorKind::UnsupportedVersion(2)
        );
    }

    #[test]
    fn truncation_inside_payload_reports_offset() {
        let t = Transaction::new(9).with(1, Value::Utf8String("hello".into()));
        let bytes = encode(&t).unwrap();
        for cut in HEADER_LEN..bytes.len() {
            let e = decode(&bytes[..cut]).unwrap_err();
            assert_eq!(e.kind, DecodeErrorKind::Truncated, "cut {cut}");
            assert_eq!(e.offset, cut);
        }
    }

    #[test]
    fn invalid_utf8_detected() {
        let t = Transaction::new(1).with(2, Value::Utf8String("ab".into()));
        let mut bytes = encode(&t).unwrap();
        let n = bytes.len();
        bytes[n - 1] = 0xFF;
        let e = decode(&bytes).unwrap_err();
        assert_eq!(e.kind, DecodeErrorKind::InvalidUtf8);
        assert_eq!(e.offset, n - 1);
    }

    #[test]
    fn oversized_blob_length_overflows() {
        let mut bytes = encode(&Transaction::new(0).with(1, Value::Blob(vec![]))).unwrap();
        bytes[HEADER_LEN + 3..HEADER_LEN + 7].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap_err().kind, DecodeErrorKind::LengthOverflow);
    }

    #[test]
    fn duplicate_tags_rejected_both_ways() {
        let t = Transaction::new(0)
            .with(1, Value::Bool(true))
            .with(1, Value::Bool(false));
        assert_eq!(encode(&t), Err(EncodeError::DuplicateTag(1)));
    }

    #[test]
    fn read_frame_splits_a_stream() {
        let a = encode(&Transaction::new(1).with(3, Value::Blob(vec![1, 2, 3]))).unwrap();
        let b = encode(&Transaction::new(2)).unwrap();
        let stream = [a.clone(), b.clone()].concat();
        let mut cursor = io::Cursor::new(stream);
        assert_eq!(read_frame(&mut cursor).unwrap(), Some(a));
        assert_eq!(read_frame(&mut cursor).unwrap(), Some(b));
        assert_eq!(read_frame(&mut cursor).unwrap(), None);
    }

    #[test]
    fn error_frame_carries_code() {
        let f = error_frame(7, "ENOMEM");
        assert!(f.is_error() && f.is_reply());
        assert_eq!(f.error_code(), Some("ENOMEM"));
        assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
    }
}
