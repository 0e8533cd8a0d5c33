//! Intent-style messages carried inside SIRF transactions.

use std::collections::BTreeMap;

use thiserror::Error;

use super::frame::{Transaction, Value};

pub const ACTION_TAG: u16 = 1;
pub const CATEGORY_TAG: u16 = 2;
pub const CLASS_TAG: u16 = 3;
pub const DATA_URI_TAG: u16 = 4;
/// Extras occupy consecutive tags from here on, as `key=value` strings in
/// key order.
pub const EXTRAS_BASE_TAG: u16 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IntentMessage {
    pub action: String,
    pub category: String,
    pub class: String,
    pub data_uri: String,
    pub extras: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IntentError {
    #[error("intent has no action")]
    MissingAction,
    #[error("intent field {0} is not a string")]
    NotAString(u16),
    #[error("malformed extra at tag {0}")]
    MalformedExtra(u16),
    #[error("extra key `{0}` contains `=`")]
    BadExtraKey(String),
}

impl IntentMessage {
    pub fn new(action: &str) -> IntentMessage {
        IntentMessage {
            action: action.to_string(),
            ..Default::default()
        }
    }

    pub fn to_transaction(&self, code: u32) -> Result<Transaction, IntentError> {
        if self.action.is_empty() {
            return Err(IntentError::MissingAction);
        }
        let s = |v: &str| Value::Utf8String(v.to_string());
        let mut t = Transaction::new(code)
            .with(ACTION_TAG, s(&self.action))
            .with(CATEGORY_TAG, s(&self.category))
            .with(CLASS_TAG, s(&self.class))
            .with(DATA_URI_TAG, s(&self.data_uri));
        for (i, (k, v)) in self.extras.iter().enumerate() {
            if k.contains('=') {
                return Err(IntentError::BadExtraKey(k.clone()));
            }
            t = t.with(EXTRAS_BASE_TAG + i as u16, s(&format!("{k}={v}")));
        }
        Ok(t)
    }

    pub fn from_transaction(t: &Transaction) -> Result<IntentMessage, IntentError> {
        let mut intent = IntentMessage::default();
        for f in &t.fields {
            let text = f.value.as_str().ok_or(IntentError::NotAString(f.tag))?;
            match f.tag {
                ACTION_TAG => intent.action = text.to_string(),
                CATEGORY_TAG => intent.category = text.to_string(),
                CLASS_TAG => intent.class = text.to_string(),
                DATA_URI_TAG => intent.data_uri = text.to_string(),
                tag if tag >= EXTRAS_BASE_TAG => {
                    let (k, v) = text.split_once('=').ok_or(IntentError::MalformedExtra(tag))?;
                    intent.extras.insert(k.to_string(), v.to_string());
                }
                _ => {}
            }
        }
        if intent.action.is_empty() {
            return Err(IntentError::MissingAction);
        }
        Ok(intent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode, encode};

    #[test]
    fn intent_round_trips_through_a_frame() {
        let mut i = IntentMessage::new("ACTION_BATTERY_CHANGED");
        i.category = "CATEGORY_DEFAULT".into();
        i.data_uri = "content://battery/1".into();
        i.extras.insert("level".into(), "80".into());
        let bytes = encode(&i.to_transaction(5).unwrap()).unwrap();
        let back = IntentMessage::from_transaction(&decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, i);
    }

    #[test]
    fn action_is_required() {
        assert_eq!(
            IntentMessage::default().to_transaction(0),
            Err(IntentError::MissingAction)
        );
        assert_eq!(
            IntentMessage::from_transaction(&Transaction::new(0)),
            Err(IntentError::MissingAction)
        );
    }
}
