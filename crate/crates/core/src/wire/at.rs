//! Line codec for the AT command protocol spoken between the radio daemon
//! and the modem.
//!
//! ```text
//! line     = command | reply
//! command  = "AT" code [ "=" params ]
//! reply    = code [ ":" [ " " ] params ]      ; Response if code is a result code, else Event
//! params   = param *( "," param )
//! param    = quoted | bare
//! quoted   = DQUOTE *( any char except DQUOTE ) DQUOTE
//! bare     = *( any char except "," and DQUOTE )
//! ```
//!
//! Result codes are the final responses a modem gives to a command
//! ([`RESULT_CODES`]); every other non-command line is an unsolicited event.

use thiserror::Error;

use super::frame::{Transaction, Value};

pub const RESULT_CODES: &[&str] = &[
    "OK",
    "ERROR",
    "CONNECT",
    "BUSY",
    "NO CARRIER",
    "NO ANSWER",
    "NO DIALTONE",
    "+CME ERROR",
    "+CMS ERROR",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AtKind {
    Command,
    Response,
    Event,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtMessage {
    pub kind: AtKind,
    pub code: String,
    pub params: Vec<String>,
}

impl AtMessage {
    pub fn command(code: &str, params: &[&str]) -> AtMessage {
        AtMessage::build(AtKind::Command, code, params)
    }

    pub fn response(code: &str, params: &[&str]) -> AtMessage {
        AtMessage::build(AtKind::Response, code, params)
    }

    pub fn event(code: &str, params: &[&str]) -> AtMessage {
        AtMessage::build(AtKind::Event, code, params)
    }

    fn build(kind: AtKind, code: &str, params: &[&str]) -> AtMessage {
        AtMessage {
            kind,
            code: code.to_string(),
            params: params.iter().map(|p| p.to_string()).collect(),
        }
    }

    pub fn check(&self) -> Result<(), AtError> {
        let bad = |why: &str| Err(AtError::InvalidMessage(why.to_string()));
        if self.code.contains(['\r', '\n']) {
            return bad("line break in code");
        }
        match self.kind {
            AtKind::Command => {
                if self.code.is_empty() {
                    return bad("empty command code");
                }
                if self.code.contains('=') {
                    return bad("`=` in command code");
                }
            }
            AtKind::Response | AtKind::Event => {
                if self.code.is_empty() {
                    return bad("empty code");
                }
                if self.code.contains(':') {
                    return bad("`:` in code");
                }
                if self.code.starts_with("AT") {
                    return bad("reply code starts with AT");
                }
                let is_result = RESULT_CODES.contains(&self.code.as_str());
                if (self.kind == AtKind::Response) != is_result {
                    return bad("result codes are exactly the responses");
                }
            }
        }
        for p in &self.params {
            if p.contains(['"', '\r', '\n']) {
                return bad("quote or line break in parameter");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AtError {
    #[error("empty line")]
    EmptyLine,
    #[error("empty code")]
    EmptyCode,
    #[error("malformed parameter list at column {0}")]
    MalformedParams(usize),
    #[error("invalid AT message: {0}")]
    InvalidMessage(String),
}

fn encode_param(p: &str) -> String {
    if p.contains(',') || p.starts_with(' ') || p.ends_with(' ') {
        format!("\"{p}\"")
    } else {
        p.to_string()
    }
}

/// Renders a message as a line, without the line terminator.
pub fn encode_at(msg: &AtMessage) -> Result<String, AtError> {
    msg.check()?;
    let params: Vec<String> = msg.params.iter().map(|p| encode_param(p)).collect();
    let joined = params.join(",");
    Ok(match (msg.kind, msg.params.is_empty()) {
        (AtKind::Command, true) => format!("AT{}", msg.code),
        (AtKind::Command, false) => format!("AT{}={joined}", msg.code),
        (_, true) => msg.code.clone(),
        (_, false) => format!("{}: {joined}", msg.code),
    })
}

fn parse_params(text: &str, col0: usize) -> Result<Vec<String>, AtError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    loop {
        if chars.get(i) == Some(&'"') {
            let close = chars[i + 1..]
                .iter()
                .position(|&c| c == '"')
                .ok_or(AtError::MalformedParams(col0 + i))?;
            out.push(chars[i + 1..i + 1 + close].iter().collect());
            i += close + 2;
            match chars.get(i) {
                None => return Ok(out),
                Some(',') => i += 1,
                Some(_) => return Err(AtError::MalformedParams(col0 + i)),
            }
        } else {
            let end = chars[i..]
                .iter()
                .position(|&c| c == ',')
                .map_or(chars.len(), |p| i + p);
            let bare: String = chars[i..end].iter().collect();
            if let Some(q) = bare.find('"') {
                return Err(AtError::MalformedParams(col0 + i + q));
            }
            out.push(bare);
            if end == chars.len() {
                return Ok(out);
            }
            i = end + 1;
        }
    }
}

/// Parses one line. Trailing CR/LF are ignored.
pub fn decode_at(line: &str) -> Result<AtMessage, AtError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.is_empty() {
        return Err(AtError::EmptyLine);
    }
    let msg = if let Some(rest) = line.strip_prefix("AT") {
        let (code, params) = match rest.split_once('=') {
            Some((code, p)) => (code, Some(parse_params(p, 2 + code.len() + 1)?)),
            None => (rest, None),
        };
        if code.is_empty() {
            return Err(AtError::EmptyCode);
        }
        AtMessage {
            kind: AtKind::Command,
            code: code.to_string(),
            params: params.unwrap_or_default(),
        }
    } else {
        let (code, params) = match line.split_once(':') {
            Some((code, p)) => {
                let skip = usize::from(p.starts_with(' '));
                (code, Some(parse_params(&p[skip..], code.len() + 1 + skip)?))
            }
            None => (line, None),
        };
        if code.is_empty() {
            return Err(AtError::EmptyCode);
        }
        let kind = if RESULT_CODES.contains(&code) {
            AtKind::Response
        } else {
            AtKind::Event
        };
        AtMessage {
            kind,
            code: code.to_string(),
            params: params.unwrap_or_default(),
        }
    };
    msg.check()?;
    Ok(msg)
}

/// Field tag of the code when an AT message is viewed as a transaction;
/// parameters follow at tags 1..=n.
pub const AT_CODE_TAG: u16 = 0;

/// Views a message as a transaction so the corruption engine can work on
/// it: the transaction code is the message kind, the AT code is a string
/// field, and each parameter a further string field.
pub fn at_to_transaction(msg: &AtMessage) -> Transaction {
    let kind = match msg.kind {
        AtKind::Command => 0,
        AtKind::Response => 1,
        AtKind::Event => 2,
    };
    let mut t = Transaction::new(kind).with(AT_CODE_TAG, Value::Utf8String(msg.code.clone()));
    for (i, p) in msg.params.iter().enumerate() {
        t = t.with(i as u16 + 1, Value::Utf8String(p.clone()));
    }
    t
}

/// Inverse of [`at_to_transaction`]. The kind of a non-command line is
/// re-derived from its code, as a receiver parsing the line would.
pub fn transaction_to_at(t: &Transaction) -> Result<AtMessage, AtError> {
    let text = |v: &Value| -> Result<String, AtError> {
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| AtError::InvalidMessage("non-string field".into()))
    };
    let code = text(
        t.field(AT_CODE_TAG)
            .ok_or_else(|| AtError::InvalidMessage("missing code field".into()))?,
    )?;
    let mut params: Vec<(u16, String)> = Vec::new();
    for f in &t.fields {
        if f.tag != AT_CODE_TAG {
            params.push((f.tag, text(&f.value)?));
        }
    }
    params.sort_by_key(|(tag, _)| *tag);
    let kind = if t.code == 0 {
        AtKind::Command
    } else if RESULT_CODES.contains(&code.as_str()) {
        AtKind::Response
    } else {
        AtKind::Event
    };
    Ok(AtMessage {
        kind,
        code,
        params: params.into_iter().map(|(_, p)| p).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_with_params() {
        assert_eq!(
            decode_at("AT+CFUN=1").unwrap(),
            AtMessage::command("+CFUN", &["1"])
        );
    }

    #[test]
    fn bare_event() {
        assert_eq!(decode_at("RING\r\n").unwrap(), AtMessage::event("RING", &[]));
    }

    #[test]
    fn empty_line_is_an_error() {
        assert_eq!(decode_at(""), Err(AtError::EmptyLine));
        assert_eq!(decode_at("\r\n"), Err(AtError::EmptyLine));
    }

    #[test]
    fn event_with_quoted_params() {
        let m = decode_at("+CLIP: \"555,1234\",129").unwrap();
        assert_eq!(m, AtMessage::event("+CLIP", &["555,1234", "129"]));
        assert_eq!(encode_at(&m).unwrap(), "+CLIP: \"555,1234\",129");
    }

    #[test]
    fn result_codes_are_responses() {
        assert_eq!(decode_at("OK").unwrap().kind, AtKind::Response);
        assert_eq!(
            decode_at("+CME ERROR: 30").unwrap(),
            AtMessage::response("+CME ERROR", &["30"])
        );
        assert_eq!(decode_at("+CREG: 1,2").unwrap().kind, AtKind::Event);
    }

    #[test]
    fn malformed_params() {
        assert!(matches!(
            decode_at("AT+X=\"open"),
            Err(AtError::MalformedParams(_))
        ));
        assert!(matches!(
            decode_at("+X: \"a\"b"),
            Err(AtError::MalformedParams(_))
        ));
        assert!(matches!(decode_at("+X: a\"b"), Err(AtError::MalformedParams(_))));
    }

    #[test]
    fn empty_codes() {
        assert_eq!(decode_at("AT"), Err(AtError::EmptyCode));
        assert_eq!(decode_at(": 1"), Err(AtError::EmptyCode));
    }

    #[test]
    fn transaction_view_round_trips() {
        let m = AtMessage::event("+CREG", &["1", "", "x y"]);
        assert_eq!(transaction_to_at(&at_to_transaction(&m)).unwrap(), m);
    }

    #[test]
    fn invalid_messages_do_not_encode() {
        assert!(encode_at(&AtMessage::response("RING", &[])).is_err());
        assert!(encode_at(&AtMessage::event("OK", &[])).is_err());
        assert!(encode_at(&AtMessage::event("+X", &["a\"b"])).is_err());
    }
}
