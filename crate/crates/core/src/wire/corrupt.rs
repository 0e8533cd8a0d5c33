//! Type-aware value corruption.
//!
//! Every pattern is deterministic for a given generator state. Patterns that
//! can coincide with their input are listed here; everything else always
//! changes the value:
//!
//! | pattern            | unchanged when                                  |
//! |--------------------|-------------------------------------------------|
//! | `Zero`             | value is already 0                              |
//! | `Negate`           | value is 0, or the two's-complement minimum     |
//! | `Max` / `Min`      | value is already the extreme                    |
//! | `OffByOne/Offset`  | float too large for the addend to register      |
//! | `RandomValue`      | empty string or blob                            |
//! | `SubstringReplace` | empty string                                    |
//! | `Truncate`         | empty string or blob                            |
//! | `BitFlip`          | empty blob (zero flips)                         |

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::frame::{decode, encode, Field, FieldKind, Transaction, Value};

pub const DEFAULT_OFFSET: i64 = 16;

const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

fn default_offset() -> i64 {
    DEFAULT_OFFSET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorruptionPattern {
    /// Replace a categorical string with another member of its domain.
    CategoricalReplace { domain: Vec<String> },
    Zero,
    OffByOne,
    OffByOffset {
        #[serde(default = "default_offset")]
        offset: i64,
    },
    Negate,
    Max,
    Min,
    RandomValue,
    NullString,
    SubstringReplace,
    Truncate,
    BitFlip,
    /// Treat a blob as a nested transaction and corrupt one of its fields.
    StructFieldCorrupt {
        selector: u16,
        inner: Box<CorruptionPattern>,
    },
}

impl CorruptionPattern {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionPattern::CategoricalReplace { .. } => "categorical-replace",
            CorruptionPattern::Zero => "zero",
            CorruptionPattern::OffByOne => "off-by-one",
            CorruptionPattern::OffByOffset { .. } => "off-by-offset",
            CorruptionPattern::Negate => "negate",
            CorruptionPattern::Max => "max",
            CorruptionPattern::Min => "min",
            CorruptionPattern::RandomValue => "random-value",
            CorruptionPattern::NullString => "null-string",
            CorruptionPattern::SubstringReplace => "substring-replace",
            CorruptionPattern::Truncate => "truncate",
            CorruptionPattern::BitFlip => "bit-flip",
            CorruptionPattern::StructFieldCorrupt { .. } => "struct-field-corrupt",
        }
    }

    pub fn applies_to(&self, kind: FieldKind) -> bool {
        use CorruptionPattern::*;
        match self {
            Zero | OffByOne | OffByOffset { .. } | Negate | Max | Min => kind.is_numeric(),
            RandomValue => true,
            CategoricalReplace { .. } | NullString | SubstringReplace => {
                kind == FieldKind::Utf8String
            }
            Truncate => matches!(kind, FieldKind::Utf8String | FieldKind::Blob),
            BitFlip | StructFieldCorrupt { .. } => kind == FieldKind::Blob,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorruptError {
    #[error("pattern {pattern} does not apply to {kind:?} values")]
    Inapplicable {
        pattern: &'static str,
        kind: FieldKind,
    },
    #[error("categorical domain has no member other than the original value")]
    DomainExhausted,
    #[error("selector {0} matches no field")]
    NoMatch(String),
    #[error("blob does not hold a nested transaction")]
    NotAStruct,
}

fn inapplicable(pattern: &CorruptionPattern, kind: FieldKind) -> CorruptError {
    CorruptError::Inapplicable {
        pattern: pattern.name(),
        kind,
    }
}

fn random_string<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

fn random_finite<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v = f64::from_bits(rng.random::<u64>());
        if v.is_finite() {
            return v;
        }
    }
}

fn draw_other<T: PartialEq, R: Rng + ?Sized>(rng: &mut R, orig: &T, draw: impl Fn(&mut R) -> T) -> T {
    loop {
        let v = draw(rng);
        if &v != orig {
            return v;
        }
    }
}

/// Corrupts one field according to `pattern`. The tag is preserved.
pub fn corrupt<R: Rng + ?Sized>(
    field: &Field,
    pattern: &CorruptionPattern,
    rng: &mut R,
) -> Result<Field, CorruptError> {
    use CorruptionPattern as P;
    let kind = field.value.kind();
    if !pattern.applies_to(kind) {
        return Err(inapplicable(pattern, kind));
    }
    let value = match (&field.value, pattern) {
        (Value::Int32(v), _) => Value::Int32(match pattern {
            P::Zero => 0,
            P::OffByOne => v.wrapping_add(1),
            P::OffByOffset { offset } => v.wrapping_add(*offset as i32),
            P::Negate => v.wrapping_neg(),
            P::Max => i32::MAX,
            P::Min => i32::MIN,
            _ => draw_other(rng, v, |r| r.random::<i32>()),
        }),
        (Value::Int64(v), _) => Value::Int64(match pattern {
            P::Zero => 0,
            P::OffByOne => v.wrapping_add(1),
            P::OffByOffset { offset } => v.wrapping_add(*offset),
            P::Negate => v.wrapping_neg(),
            P::Max => i64::MAX,
            P::Min => i64::MIN,
            _ => draw_other(rng, v, |r| r.random::<i64>()),
        }),
        (Value::Float64(v), _) => Value::Float64(match pattern {
            P::Zero => 0.0,
            P::OffByOne => v + 1.0,
            P::OffByOffset { offset } => v + *offset as f64,
            P::Negate => -v,
            P::Max => f64::MAX,
            P::Min => f64::MIN,
            _ => draw_other(rng, v, |r| random_finite(r)),
        }),
        (Value::Bool(v), _) => Value::Bool(!v),
        (Value::Utf8String(s), P::CategoricalReplace { domain }) => {
            let others: Vec<&String> = domain.iter().filter(|d| *d != s).collect();
            if others.is_empty() {
                return Err(CorruptError::DomainExhausted);
            }
            Value::Utf8String(others[rng.random_range(0..others.len())].clone())
        }
        (Value::Utf8String(_), P::NullString) => Value::Utf8String(String::new()),
        (Value::Utf8String(s), P::SubstringReplace) => {
            let mut chars: Vec<char> = s.chars().collect();
            if !chars.is_empty() {
                let at = rng.random_range(0..chars.len());
                let old = chars[at];
                chars[at] = draw_other(rng, &old, |r| ALPHABET[r.random_range(0..ALPHABET.len())] as char);
            }
            Value::Utf8String(chars.into_iter().collect())
        }
        (Value::Utf8String(s), P::Truncate) => {
            let n = s.chars().count() / 2;
            Value::Utf8String(s.chars().take(n).collect())
        }
        (Value::Utf8String(s), _) => {
            let n = s.chars().count();
            if n == 0 {
                Value::Utf8String(String::new())
            } else {
                Value::Utf8String(draw_other(rng, s, |r| random_string(r, n)))
            }
        }
        (Value::Blob(b), P::Truncate) => Value::Blob(b[..b.len() / 2].to_vec()),
        (Value::Blob(b), P::BitFlip) => {
            let mut out = b.clone();
            let flips = b.len().div_ceil(64);
            for bit in index::sample(rng, b.len() * 8, flips) {
                out[bit / 8] ^= 1 << (bit % 8);
            }
            Value::Blob(out)
        }
        (Value::Blob(b), P::StructFieldCorrupt { selector, inner }) => {
            let nested = decode(b).map_err(|_| CorruptError::NotAStruct)?;
            let corrupted = corrupt_transaction(&nested, Selector::Tag(*selector), inner, rng)?;
            Value::Blob(encode(&corrupted).map_err(|_| CorruptError::NotAStruct)?)
        }
        (Value::Blob(b), _) => {
            if b.is_empty() {
                Value::Blob(Vec::new())
            } else {
                Value::Blob(draw_other(rng, b, |r| (0..b.len()).map(|_| r.random::<u8>()).collect()))
            }
        }
    };
    Ok(Field {
        tag: field.tag,
        value,
    })
}

/// Which parts of a transaction a corruption touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selector {
    /// Every field the pattern applies to.
    All,
    Tag(u16),
    /// The message code itself.
    Code,
    Flags,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::All => f.write_str("all"),
            Selector::Tag(t) => write!(f, "{t}"),
            Selector::Code => f.write_str("code"),
            Selector::Flags => f.write_str("flags"),
        }
    }
}

impl FromStr for Selector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(Selector::All),
            "code" => Ok(Selector::Code),
            "flags" => Ok(Selector::Flags),
            _ => s
                .parse::<u16>()
                .map(Selector::Tag)
                .map_err(|_| format!("invalid selector `{s}`")),
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn corrupt_unsigned<R: Rng + ?Sized>(
    v: u64,
    max: u64,
    pattern: &CorruptionPattern,
    rng: &mut R,
) -> Result<u64, CorruptError> {
    use CorruptionPattern as P;
    let wrap = |x: u64| x & max;
    Ok(match pattern {
        P::Zero | P::Min => 0,
        P::OffByOne => wrap(v.wrapping_add(1)),
        P::OffByOffset { offset } => wrap(v.wrapping_add(*offset as u64)),
        P::Negate => wrap(v.wrapping_neg()),
        P::Max => max,
        P::RandomValue => draw_other(rng, &v, |r| r.random::<u64>() & max),
        other => return Err(inapplicable(other, FieldKind::Int64)),
    })
}

/// Corrupts the selected parts of `t`; everything else is left untouched.
pub fn corrupt_transaction<R: Rng + ?Sized>(
    t: &Transaction,
    selector: Selector,
    pattern: &CorruptionPattern,
    rng: &mut R,
) -> Result<Transaction, CorruptError> {
    let mut out = t.clone();
    match selector {
        Selector::Code => {
            out.code = corrupt_unsigned(u64::from(t.code), u64::from(u32::MAX), pattern, rng)? as u32;
        }
        Selector::Flags => {
            out.flags = corrupt_unsigned(u64::from(t.flags), u64::from(u8::MAX), pattern, rng)? as u8;
        }
        Selector::Tag(tag) => {
            let slot = out
                .fields
                .iter_mut()
                .find(|f| f.tag == tag)
                .ok_or_else(|| CorruptError::NoMatch(selector.to_string()))?;
            *slot = corrupt(slot, pattern, rng)?;
        }
        Selector::All => {
            let mut touched = 0;
            for slot in out.fields.iter_mut() {
                if pattern.applies_to(slot.value.kind()) {
                    *slot = corrupt(slot, pattern, rng)?;
                    touched += 1;
                }
            }
            if touched == 0 {
                return Err(CorruptError::NoMatch(selector.to_string()));
            }
        }
    }
    Ok(out)
}
