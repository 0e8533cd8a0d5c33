//! Wire formats: SIRF transaction frames, AT command lines and intents, plus
//! the corruption engine that operates on them.

mod at;
mod corrupt;
mod frame;
mod intent;

pub use at::{
    at_to_transaction, decode_at, encode_at, transaction_to_at, AtError, AtKind, AtMessage,
    AT_CODE_TAG, RESULT_CODES,
};
pub use corrupt::{corrupt, corrupt_transaction, CorruptError, CorruptionPattern, Selector, DEFAULT_OFFSET};
pub use frame::{
    decode, encode, error_frame, frame_length, read_frame, DecodeError, DecodeErrorKind, EncodeError, Field,
    FieldKind, Transaction, Value, ERROR_TAG, FIELD_HEADER_LEN, FLAG_ERROR, FLAG_ONEWAY,
    FLAG_REPLY, HEADER_LEN, MAGIC, MAX_BLOB_LEN, MAX_FIELDS, VERSION,
};
pub use intent::{IntentError, IntentMessage};
