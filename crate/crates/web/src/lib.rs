//! Browser bindings for three sirfit operations. The plain functions return
//! `Result<String, String>` so they can be tested natively; the
//! `#[wasm_bindgen]` wrappers convert errors into JS exceptions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sirfit_core::analyze::{fisher_exact_rxc, ContingencyTable, FisherMethod, DEFAULT_BUDGET};
use sirfit_core::model::{derive_fault_model, load_architecture, render_fault_model};
use sirfit_core::wire::{corrupt_transaction, decode, encode, CorruptionPattern, Selector, Transaction, Value};
use wasm_bindgen::prelude::*;

/// Derives the fault model of an architecture TOML and renders it.
pub fn derive(arch: &str) -> Result<String, String> {
    let arch = load_architecture(arch).map_err(|e| e.to_string())?;
    let specs = derive_fault_model(&arch).map_err(|e| e.to_string())?;
    Ok(render_fault_model(&specs))
}

/// A small camera request frame, hex encoded.
pub fn sample_frame() -> String {
    let t = Transaction::new(0x0201)
        .with(1, Value::Int32(0))
        .with(2, Value::Utf8String("back".into()))
        .with(3, Value::Int64(4_000_000))
        .with(4, Value::Blob(vec![0xFF, 0xD8, 0xFF, 0xE0, 0x00, 0x10]));
    hex::encode(encode(&t).expect("sample frame encodes"))
}

fn describe(t: &Transaction) -> String {
    let mut out = format!("code=0x{:04x} flags=0x{:02x}\n", t.code, t.flags);
    for f in &t.fields {
        out += &format!("  {:>5} {:?} {}\n", f.tag, f.value.kind(), f.value);
    }
    out
}

fn parse_pattern(pattern: &str) -> Result<CorruptionPattern, String> {
    let pattern = pattern.trim();
    let json = if pattern.starts_with('{') {
        pattern.to_string()
    } else {
        format!("{{\"kind\":{}}}", serde_json::Value::String(pattern.into()))
    };
    serde_json::from_str(&json).map_err(|e| format!("pattern: {e}"))
}

/// Decodes a hex SIRF frame, applies `pattern` to the parts chosen by
/// `selector` and reports both versions plus the corrupted hex.
pub fn corrupt(frame_hex: &str, selector: &str, pattern: &str, seed: u64) -> Result<String, String> {
    let clean: String = frame_hex.chars().filter(|c| !c.is_whitespace()).collect();
    let bytes = hex::decode(clean).map_err(|e| format!("hex: {e}"))?;
    let t = decode(&bytes).map_err(|e| e.to_string())?;
    let selector: Selector = selector.trim().parse()?;
    let pattern = parse_pattern(pattern)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = corrupt_transaction(&t, selector, &pattern, &mut rng).map_err(|e| e.to_string())?;
    let out = encode(&c).map_err(|e| e.to_string())?;
    Ok(format!("before\n{}after\n{}hex\n{}\n", describe(&t), describe(&c), hex::encode(out)))
}

/// Runs Fisher's exact test on whitespace-separated rows of counts.
pub fn fisher(table: &str) -> Result<String, String> {
    let rows = table
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<i64>().map_err(|_| format!("not a count: {s:?}")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let t = ContingencyTable::new(rows).map_err(|e| e.to_string())?;
    let r = fisher_exact_rxc(&t, DEFAULT_BUDGET);
    let method = match r.method {
        FisherMethod::Exact { tables } => format!("exact over {tables} tables"),
        FisherMethod::MonteCarlo { samples, std_error, .. } => {
            format!("Monte Carlo, {samples} samples, standard error {std_error:.2e}")
        }
    };
    Ok(format!("p = {:.6}\n{method}\n", r.p_value))
}

#[wasm_bindgen(js_name = deriveModel)]
pub fn derive_model(arch: &str) -> Result<String, JsValue> {
    derive(arch).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = sampleFrame)]
pub fn sample_frame_js() -> String {
    sample_frame()
}

#[wasm_bindgen(js_name = corruptFrame)]
pub fn corrupt_frame(frame_hex: &str, selector: &str, pattern: &str, seed: u32) -> Result<String, JsValue> {
    corrupt(frame_hex, selector, pattern, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = fisherTest)]
pub fn fisher_test(table: &str) -> Result<String, JsValue> {
    fisher(table).map_err(|e| JsValue::from_str(&e))
}
