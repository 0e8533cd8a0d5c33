//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::os::unix::net::UnixStream;
use std::panic;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sirfit_core::analyze::{
    classify, distribution, fisher_exact_2x2, fisher_exact_rxc, parse_line, parse_log, ContingencyTable,
    DistributionReport, FisherMethod, OutcomeKind, DEFAULT_BUDGET,
};
use sirfit_core::campaign::{load_campaign, CampaignConfig};
use sirfit_core::inject::{Binding, Controller, Direction, Filter};
use sirfit_core::model::{derive_fault_model, load_architecture, load_fault_model, render_fault_model};
use sirfit_core::wire::{
    at_to_transaction, decode, decode_at, encode, encode_at, frame_length, transaction_to_at, AtKind, AtMessage,
    Field, Transaction, Value, RESULT_CODES,
};
use sirfit_runtime::net::{accept_loop, bind, write_all, Framing, MessageReader};
use sirfit_runtime::proxy::{attach_proxy, ChannelInfo};
use sirfit_runtime::runner::{run_campaign, ExperimentRecord, RunnerOptions, REPORT_KEYS};
use sirfit_runtime::Topology;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> String {
    fs::read_to_string(fixtures().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Runs `f` with a time limit, turning panics into failures.
fn criterion(name: &'static str, limit: Duration, f: impl FnOnce() -> Result<String, String>) -> Verdict {
    let start = Instant::now();
    let result = panic::catch_unwind(panic::AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (false, format!("{d}; took {elapsed:.1?}, limit {limit:?}")),
        Err(d) => (false, d),
    };
    let v = Verdict {
        name,
        pass,
        detail,
        elapsed,
    };
    report(&v);
    v
}

fn report(v: &Verdict) {
    println!(
        "{} {:<28} {:>8.2}s  {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.name,
        v.elapsed.as_secs_f64(),
        v.detail
    );
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Derivation golden

const PHONE_CLASSES: &[(&str, &str, &str)] = &[
    ("baseband-driver/ttyS1.read/S1/permanent", "availability", "error-return"),
    ("baseband-driver/ttyS1.read/S1/transient", "availability", "error-return"),
    ("baseband-driver/ttyS1.read/S4/transient", "output-value", "wrong-output"),
    ("baseband-driver/ttyS1.write/S1/permanent", "availability", "error-return"),
    ("baseband-driver/ttyS1.write/S1/transient", "availability", "error-return"),
    ("baseband-driver/ttyS1.write/S4/transient", "output-value", "wrong-output"),
    ("baseband-driver/ttyS1/R2/permanent", "resource-management", "access-denied"),
    ("baseband-driver/ttyS1/R3/permanent", "resource-management", "exhaustion"),
    ("rild/rild-socket.receive/S1/permanent", "availability", "error-return"),
    ("rild/rild-socket.receive/S1/transient", "availability", "error-return"),
    ("rild/rild-socket.receive/S2/transient", "timeliness", "lost-message"),
    ("rild/rild-socket.receive/S3/permanent", "timeliness", "delay"),
    ("rild/rild-socket.receive/S3/transient", "timeliness", "delay"),
    ("rild/rild-socket.receive/S4/transient", "output-value", "wrong-output"),
    ("rild/rild-socket.send/S1/permanent", "availability", "error-return"),
    ("rild/rild-socket.send/S1/transient", "availability", "error-return"),
    ("rild/rild-socket.send/S2/transient", "timeliness", "lost-message"),
    ("rild/rild-socket.send/S3/permanent", "timeliness", "delay"),
    ("rild/rild-socket.send/S3/transient", "timeliness", "delay"),
    ("rild/rild-socket.send/S4/transient", "output-value", "wrong-output"),
    ("rild/rild/R1-crash/permanent", "resource-management", "crash"),
    ("rild/rild/R1-hang/permanent", "resource-management", "hang"),
    ("rild/rild-heap/R3/permanent", "resource-management", "exhaustion"),
    ("rild/rild-socket/R2/permanent", "resource-management", "access-denied"),
    ("rild/rild-socket/R3/permanent", "resource-management", "exhaustion"),
    ("rild/rild-threads/R1-crash/permanent", "resource-management", "crash"),
    ("rild/rild-threads/R1-hang/permanent", "resource-management", "hang"),
];

fn kebab(v: serde_json::Result<serde_json::Value>) -> String {
    v.unwrap().as_str().unwrap_or_default().to_string()
}

fn derivation_golden() -> Result<String, String> {
    let arch = load_architecture(&fixture("phone.arch.toml")).map_err(|e| e.to_string())?;
    let specs = derive_fault_model(&arch).map_err(|e| e.to_string())?;
    let rendered = render_fault_model(&specs);
    ensure(rendered == fixture("phone.model.toml"), || "rendering differs from the golden file".into())?;
    let got: BTreeSet<(String, String, String)> =
        specs.iter().map(|s| (s.id.clone(), kebab(serde_json::to_value(s.mode)), kebab(serde_json::to_value(s.effect)))).collect();
    let want: BTreeSet<(String, String, String)> =
        PHONE_CLASSES.iter().map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string())).collect();
    ensure(got == want, || {
        format!(
            "missing {:?}, unexpected {:?}",
            want.difference(&got).collect::<Vec<_>>(),
            got.difference(&want).collect::<Vec<_>>()
        )
    })?;
    ensure(specs.len() == got.len(), || "duplicate entries".into())?;
    Ok(format!("{} entries, byte-identical", specs.len()))
}

// Probability filters

fn count_injections(seed: u64, p: f64, n: u64) -> usize {
    let golden = load_fault_model(&fixture("phone.model.toml")).unwrap();
    let mut spec = golden
        .into_iter()
        .find(|s| s.id == "rild/rild-socket.receive/S1/transient")
        .unwrap();
    spec.filters = vec![Filter::Probability { p }];
    let controller = Controller::new(
        seed,
        vec![Binding {
            point: "rild-socket.receive".into(),
            direction: Some(Direction::Request),
            spec,
        }],
    );
    let hits = (0..n)
        .filter(|_| controller.intercept_call("rild-socket.receive", None, b"ping").unwrap().is_some())
        .count();
    assert_eq!(hits, controller.injection_log().len());
    hits
}

fn probability_filters() -> Result<String, String> {
    let mut seeds = vec![0, 1, 7, 42, 20240601, u64::MAX];
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    seeds.extend((0..4).map(|_| rng.random::<u64>()));
    let mut counts = Vec::new();
    for &seed in &seeds {
        let k = count_injections(seed, 0.10, 20_000);
        ensure((1830..=2170).contains(&k), || format!("seed {seed}: {k} injections at p=0.1"))?;
        counts.push(k);
        let all = count_injections(seed, 1.0, 20_000);
        ensure(all == 20_000, || format!("seed {seed}: {all} injections at p=1"))?;
        let none = count_injections(seed, 0.0, 20_000);
        ensure(none == 0, || format!("seed {seed}: {none} injections at p=0"))?;
    }
    Ok(format!("p=0.1 counts {counts:?} over {} seeds", seeds.len()))
}

// Codecs

fn value_strategy() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i32>().prop_map(Value::Int32),
        any::<i64>().prop_map(Value::Int64),
        any::<bool>().prop_map(Value::Bool),
        any::<u64>().prop_map(|b| Value::Float64(f64::from_bits(b))),
        ".{0,24}".prop_map(Value::Utf8String),
        proptest::collection::vec(any::<u8>(), 0..48).prop_map(Value::Blob),
    ]
}

fn transaction_strategy() -> impl Strategy<Value = Transaction> {
    (
        any::<u32>(),
        any::<u8>(),
        proptest::collection::btree_map(any::<u16>(), value_strategy(), 0..12),
    )
        .prop_map(|(code, flags, fields)| Transaction {
            code,
            flags,
            fields: fields.into_iter().map(|(tag, value)| Field::new(tag, value)).collect(),
        })
}

fn at_strategy() -> impl Strategy<Value = AtMessage> {
    let params = proptest::collection::vec("[A-Za-z0-9 ,.+?/-]{0,8}", 0..4);
    let result = proptest::sample::select(RESULT_CODES.to_vec());
    prop_oneof![
        ("[A-Z+&][A-Z0-9+&?]{0,6}", params.clone()).prop_map(|(code, params)| AtMessage {
            kind: AtKind::Command,
            code,
            params
        }),
        (result, params.clone()).prop_map(|(code, params)| AtMessage {
            kind: AtKind::Response,
            code: code.to_string(),
            params
        }),
        ("\\+[A-Z]{1,6}", params).prop_map(|(code, params)| AtMessage {
            kind: AtKind::Event,
            code,
            params
        }),
    ]
}

fn codec_properties() -> Result<String, String> {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&transaction_strategy(), |t| {
            let bytes = encode(&t).expect("generated transactions are valid");
            prop_assert_eq!(frame_length(&bytes).unwrap(), Some(bytes.len()));
            prop_assert_eq!(decode(&bytes).unwrap(), t);
            Ok(())
        })
        .map_err(|e| format!("transaction round trip: {e}"))?;

    let mut runner = TestRunner::new(Config {
        cases: 1_000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&at_strategy(), |m| {
            let line = encode_at(&m).expect("generated messages are valid");
            prop_assert_eq!(&decode_at(&format!("{line}\r\n")).unwrap(), &m);
            prop_assert_eq!(&transaction_to_at(&at_to_transaction(&m)).unwrap(), &m);
            Ok(())
        })
        .map_err(|e| format!("AT round trip: {e}"))?;

    let seedbank: Vec<Vec<u8>> = {
        let mut runner = TestRunner::deterministic();
        (0..64)
            .map(|_| encode(&transaction_strategy().new_tree(&mut runner).unwrap().current()).unwrap())
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let mut rejected = 0usize;
    for i in 0..100_000 {
        let bytes = if i % 2 == 0 {
            let len = rng.random_range(0..96);
            (0..len).map(|_| rng.random::<u8>()).collect::<Vec<u8>>()
        } else {
            let mut b = seedbank[rng.random_range(0..seedbank.len())].clone();
            for _ in 0..rng.random_range(1..5) {
                match rng.random_range(0..3) {
                    0 if !b.is_empty() => {
                        let at = rng.random_range(0..b.len());
                        b[at] = rng.random();
                    }
                    1 if !b.is_empty() => b.truncate(rng.random_range(0..b.len())),
                    _ => b.push(rng.random()),
                }
            }
            b
        };
        let outcome = panic::catch_unwind(|| {
            let framed = decode(&bytes).is_err();
            let _ = frame_length(&bytes);
            let _ = decode_at(&String::from_utf8_lossy(&bytes));
            framed
        });
        match outcome {
            Ok(err) => rejected += usize::from(err),
            Err(_) => return Err(format!("decode panicked on {bytes:02x?}")),
        }
    }
    Ok(format!("10000 frames and 1000 AT lines round-trip; 100000 fuzz inputs, {rejected} rejected, no panic"))
}

// Classifier goldens

fn classifier_goldens() -> Result<String, String> {
    let expected = fixture("logs/expected.txt");
    let mut checked = 0;
    for line in expected.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [file, primary, all] = cols[..] else {
            return Err(format!("bad expectation line `{line}`"));
        };
        let outcome = classify(&parse_log(&fixture(&format!("logs/{file}"))));
        let want: OutcomeKind = primary.parse().map_err(|e: String| e)?;
        ensure(outcome.primary == want, || format!("{file}: {} instead of {want}", outcome.primary))?;
        let want_all: BTreeSet<OutcomeKind> = match all {
            "-" => BTreeSet::new(),
            list => list.split(',').map(|k| k.parse()).collect::<Result<_, String>>()?,
        };
        ensure(outcome.all_observed == want_all, || format!("{file}: observed {:?}", outcome.all_observed))?;
        checked += 1;
    }
    ensure(checked >= 5, || "too few fixture logs".into())?;
    Ok(format!("{checked} fixture logs"))
}

// Fisher oracle

fn factorial(n: u64) -> u128 {
    (1..=n as u128).product()
}

/// Every table with the given margins.
fn tables_with_margins(rows: &[u64], cols: &[u64]) -> Vec<Vec<Vec<u64>>> {
    fn fill(r: usize, c: usize, rows: &mut Vec<u64>, cols: &mut Vec<u64>, cur: &mut Vec<Vec<u64>>, out: &mut Vec<Vec<Vec<u64>>>) {
        let (nr, nc) = (rows.len(), cols.len());
        if r == nr {
            if cols.iter().all(|&c| c == 0) {
                out.push(cur.clone());
            }
            return;
        }
        if c == nc - 1 {
            let v = rows[r];
            if v <= cols[c] {
                cur[r][c] = v;
                cols[c] -= v;
                rows[r] = 0;
                fill(r + 1, 0, rows, cols, cur, out);
                rows[r] = v;
                cols[c] += v;
            }
            return;
        }
        for v in 0..=rows[r].min(cols[c]) {
            cur[r][c] = v;
            rows[r] -= v;
            cols[c] -= v;
            fill(r, c + 1, rows, cols, cur, out);
            rows[r] += v;
            cols[c] += v;
        }
    }
    let mut out = Vec::new();
    let mut cur = vec![vec![0; cols.len()]; rows.len()];
    fill(0, 0, &mut rows.to_vec(), &mut cols.to_vec(), &mut cur, &mut out);
    out
}

/// Brute-force p-value. With fixed margins a table's probability is
/// proportional to 1 / prod(cell!), so extremeness compares exact integers.
fn oracle_p(table: &[Vec<u64>]) -> f64 {
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let weight = |t: &[Vec<u64>]| -> u128 { t.iter().flatten().map(|&x| factorial(x)).product() };
    let observed = weight(table);
    let (mut extreme, mut all) = (0.0, 0.0);
    for t in tables_with_margins(&rows, &cols) {
        let w = weight(&t);
        let mass = 1.0 / w as f64;
        all += mass;
        if w >= observed {
            extreme += mass;
        }
    }
    extreme / all
}

fn random_table(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<u64>> {
    loop {
        let t: Vec<Vec<u64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0..=4)).collect()).collect();
        let n: u64 = t.iter().flatten().sum();
        if n > 0 && n <= 14 {
            return t;
        }
    }
}

fn fisher_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF15E);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (r, c) = if i < 100 {
            (2, 2)
        } else {
            (rng.random_range(2..=4), rng.random_range(2..=4))
        };
        let t = random_table(&mut rng, r, c);
        let want = oracle_p(&t);
        let signed: Vec<Vec<i64>> = t.iter().map(|r| r.iter().map(|&x| x as i64).collect()).collect();
        let got = if r == 2 && c == 2 {
            fisher_exact_2x2([[signed[0][0], signed[0][1]], [signed[1][0], signed[1][1]]]).map_err(|e| e.to_string())?
        } else {
            let res = fisher_exact_rxc(&ContingencyTable::new(signed).map_err(|e| e.to_string())?, DEFAULT_BUDGET);
            ensure(matches!(res.method, FisherMethod::Exact { .. }), || format!("{t:?}: not exact"))?;
            res.p_value
        };
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-10, || format!("{t:?}: {got} vs oracle {want}"))?;
    }
    let p = fisher_exact_2x2([[5, 5], [5, 5]]).map_err(|e| e.to_string())?;
    ensure(p == 1.0, || format!("[[5,5],[5,5]] gave {p}"))?;
    for rows in [vec![vec![1, 2, 0, 0], vec![1, 2, 0, 0], vec![1, 2, 0, 0]], vec![vec![0, 4, 0, 0]; 3], vec![vec![2, 1, 1, 0]; 3]] {
        let res = fisher_exact_rxc(&ContingencyTable::new(rows.clone()).unwrap(), DEFAULT_BUDGET);
        ensure(res.p_value == 1.0, || format!("{rows:?} gave {}", res.p_value))?;
    }
    Ok(format!("200 tables, max deviation {worst:.2e}; identical rows give 1.0"))
}

// Interposition overhead

fn echo_server(path: &Path) -> thread::JoinHandle<()> {
    let listener = bind(path).unwrap();
    thread::spawn(move || {
        accept_loop(&listener, &|| true, |stream| {
            thread::spawn(move || {
                let mut out = stream.try_clone().unwrap();
                let mut reader = MessageReader::new(stream, Framing::Sirf).unwrap();
                while let Ok(Some(m)) = reader.next(&|| false) {
                    if write_all(&mut out, &m).is_err() {
                        break;
                    }
                }
            });
        })
    })
}

fn median_rtt(path: &Path, frames: usize) -> Duration {
    let stream = UnixStream::connect(path).unwrap();
    let mut out = stream.try_clone().unwrap();
    let mut reader = MessageReader::new(stream, Framing::Sirf).unwrap();
    let frame = encode(&Transaction::new(1).with(1, Value::Int32(7)).with(2, Value::Utf8String("ping".into()))).unwrap();
    let mut rtts: Vec<Duration> = (0..frames)
        .map(|_| {
            let t0 = Instant::now();
            write_all(&mut out, &frame).unwrap();
            let back = reader.next(&|| false).unwrap().unwrap();
            assert_eq!(back, frame);
            t0.elapsed()
        })
        .collect();
    rtts.sort();
    rtts[rtts.len() / 2]
}

fn proxy_overhead() -> Result<(f64, String), String> {
    let dir = tempfile::Builder::new().prefix("sf").tempdir_in("/tmp").unwrap();
    let upstream = dir.path().join("echo.sock");
    let listen = dir.path().join("echo.fi.sock");
    let _server = echo_server(&upstream);
    let info = ChannelInfo {
        name: "echo".into(),
        framing: Framing::Sirf,
        operations: Default::default(),
        path_hint: listen.display().to_string(),
        open_point: "echo.connect".into(),
    };
    let mut proxy = attach_proxy(&listen, &upstream, info, Arc::new(Controller::new(1, Vec::new()))).map_err(|e| e.to_string())?;
    median_rtt(&upstream, 500);
    median_rtt(&listen, 500);
    let direct = median_rtt(&upstream, 10_000);
    let proxied = median_rtt(&listen, 10_000);
    proxy.stop();
    let overhead = proxied.saturating_sub(direct).as_secs_f64() * 1e3;
    Ok((overhead, format!("median overhead {overhead:.3} ms (direct {direct:.1?}, proxied {proxied:.1?})")))
}

// Campaign-driven criteria

fn campaign(text: &str) -> CampaignConfig {
    let topology = Topology::default();
    load_campaign(text, &|t: &str| topology.resolve_target(t)).unwrap_or_else(|e| panic!("{e}"))
}

fn run(config: &CampaignConfig, out: &Path) -> Result<Vec<ExperimentRecord>, String> {
    let summary = run_campaign(config, &RunnerOptions::new(out), &mut |_| {}).map_err(|e| e.to_string())?;
    Ok(summary.records)
}

fn invalid(records: &[ExperimentRecord]) -> Result<(), String> {
    match records.iter().find(|r| !r.valid) {
        Some(r) => Err(format!("{} invalid: {:?}", r.run_id, r.invalid_reason)),
        None => Ok(()),
    }
}

fn logcat(out: &Path, r: &ExperimentRecord) -> String {
    fs::read_to_string(out.join(&r.artifacts).join("logcat.txt")).unwrap_or_default()
}

fn fault_free(overhead: Result<(f64, String), String>) -> Result<String, String> {
    let (ms, detail) = overhead?;
    ensure(ms < 1.0, || detail.clone())?;
    let out = tempfile::tempdir().unwrap();
    let records = run(&campaign(&fixture("faultfree.campaign.toml")), out.path())?;
    invalid(&records)?;
    let failures: Vec<String> = records
        .iter()
        .filter(|r| r.outcome != OutcomeKind::NoFailure)
        .map(|r| format!("{}: {} {:?}", r.run_id, r.outcome, r.evidence))
        .collect();
    ensure(failures.is_empty(), || format!("failures in the fault-free campaign: {failures:?}"))?;
    let actions: usize = records.iter().map(|r| r.workload_actions).sum();
    Ok(format!("{detail}; fault-free: {} runs, {actions} actions, 0 failures", records.len()))
}

const GLOBAL: &str = "[global]\nbase_seed = 5150\nteardown_timeout_ms = 5000\nlog_dir = \"runs\"\nanr_threshold_ms = 2000\n";

const CAMERA_FAULT: &str = r#"
[experiment.fault]
id = "media_server/camera-service.take_picture/S1/permanent"
component = "media_server"
target = { kind = "operation", interface = "camera-service", operation = "take_picture" }
mode = "availability"
persistence = "permanent"
provenance = "S1"
effect = "error-return"
action = { kind = "return-error", code = "SERVICE_ERROR" }
filters = [{ kind = "probability", p = 1.0 }]
"#;

fn service_error_profiles() -> Result<String, String> {
    let plan = |profile: &str| {
        format!(
            "[[experiment]]\nid = \"camera/{profile}\"\nsubsystem = \"camera\"\nrepetitions = 3\nwarmup_ms = 3000\nrun_ms = 4000\ntrigger = \"take_picture\"\nrobustness = \"{profile}\"\n{CAMERA_FAULT}"
        )
    };
    let config = campaign(&format!("{GLOBAL}{}{}", plan("fragile"), plan("graceful")));
    let out = tempfile::tempdir().unwrap();
    let records = run(&config, out.path())?;
    invalid(&records)?;
    for r in &records {
        let (want, graceful) = if r.plan_id == "camera/fragile" {
            (OutcomeKind::Crash, false)
        } else {
            (OutcomeKind::NoFailure, true)
        };
        ensure(r.outcome == want, || format!("{}: {} {:?}", r.run_id, r.outcome, r.evidence))?;
        ensure(!graceful || logcat(out.path(), r).contains("restarting service 'media_server'"), || {
            format!("{}: no service restart logged", r.run_id)
        })?;
    }
    Ok("fragile Crash 3/3; graceful NoFailure 3/3 with media_server restarts".into())
}

fn sensor_cascade() -> Result<String, String> {
    let config = campaign(&format!(
        r#"{GLOBAL}
[[experiment]]
id = "sensors/cascade"
subsystem = "sensors"
repetitions = 3
warmup_ms = 3000
run_ms = 4000
trigger = "read_sensor"

[experiment.fault]
id = "sensor-driver/sensor_hub.read/R2/permanent"
component = "sensor-driver"
target = {{ kind = "operation", interface = "sensor_hub", operation = "read" }}
mode = "resource-management"
persistence = "permanent"
provenance = "R2"
effect = "access-denied"
action = {{ kind = "deny-resource", resource = "device-file", code = "EACCES" }}
filters = [{{ kind = "probability", p = 1.0 }}]
"#
    ));
    let out = tempfile::tempdir().unwrap();
    let records = run(&config, out.path())?;
    invalid(&records)?;
    for r in &records {
        ensure(r.outcome == OutcomeKind::Crash, || format!("{}: {} {:?}", r.run_id, r.outcome, r.evidence))?;
        let lines: Vec<_> = logcat(out.path(), r).lines().filter_map(parse_line).collect();
        let crash = lines
            .iter()
            .position(|l| l.message.contains("FATAL EXCEPTION IN SYSTEM PROCESS"))
            .ok_or_else(|| format!("{}: system_server did not crash", r.run_id))?;
        let pid = lines[crash].pid;
        let hosted: BTreeSet<&str> = lines[..crash].iter().filter(|l| l.pid == pid).map(|l| l.tag.as_str()).collect();
        let after: Vec<_> = lines[crash + 1..].iter().filter(|l| l.pid == pid).collect();
        ensure(after.len() <= 1 && after.iter().all(|l| l.tag == "AndroidRuntime"), || {
            format!("{}: pid {pid} kept logging: {after:?}", r.run_id)
        })?;
        for tag in ["ActivityManager", "PackageManager", "SensorsService"] {
            ensure(hosted.contains(tag), || format!("{}: no {tag} stream from pid {pid}", r.run_id))?;
        }
    }
    Ok("system_server and co-hosted services fall silent, Crash 3/3".into())
}

fn stop_activity_anr() -> Result<String, String> {
    let config = campaign(&format!(
        r#"{GLOBAL}
[[experiment]]
id = "activity/stall"
subsystem = "activity"
repetitions = 3
warmup_ms = 3000
run_ms = 4000
trigger = "stop_activity"

[experiment.fault]
id = "system_server/activity-manager.stop_activity/S2/permanent"
component = "system_server"
target = {{ kind = "operation", interface = "activity-manager", operation = "stop_activity" }}
mode = "timeliness"
persistence = "permanent"
provenance = "S2"
effect = "lost-message"
action = {{ kind = "stall" }}
filters = [{{ kind = "probability", p = 1.0 }}]
"#
    ));
    let threshold = config.global.anr_threshold_ms;
    let out = tempfile::tempdir().unwrap();
    let records = run(&config, out.path())?;
    invalid(&records)?;
    let mut latencies = Vec::new();
    for r in &records {
        ensure(r.outcome == OutcomeKind::Anr, || format!("{}: {} {:?}", r.run_id, r.outcome, r.evidence))?;
        let injected = r.injections.first().ok_or("no injection recorded")?.timestamp_ms;
        let anr = r
            .evidence
            .iter()
            .filter_map(|l| parse_line(l))
            .find(|l| l.message.starts_with("ANR in "))
            .ok_or("no ANR line")?;
        let latency = anr.timestamp_ms.saturating_sub(injected);
        ensure(latency <= threshold + 1000, || format!("{}: ANR after {latency} ms", r.run_id))?;
        latencies.push(latency);
    }
    Ok(format!("ANR 3/3, {latencies:?} ms after the stall (limit {} ms)", threshold + 1000))
}

fn demo_run() -> Result<(Duration, DistributionReport, DistributionReport), String> {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let records = run(&campaign(&fixture("demo.campaign.toml")), out.path())?;
    let elapsed = start.elapsed();
    invalid(&records)?;
    let classified: Vec<_> = records.iter().map(|r| r.classified()).collect();
    let full = distribution(&classified, &REPORT_KEYS).map_err(|e| e.to_string())?;
    let by_subsystem = distribution(&classified, &["subsystem"]).map_err(|e| e.to_string())?;
    Ok((elapsed, full, by_subsystem))
}

fn demo_determinism(
    a: Result<(Duration, DistributionReport, DistributionReport), String>,
    b: Result<(Duration, DistributionReport, DistributionReport), String>,
) -> Result<String, String> {
    let (ta, full_a, subs_a) = a?;
    let (tb, full_b, subs_b) = b?;
    let limit = Duration::from_secs(600);
    ensure(ta < limit && tb < limit, || format!("campaign took {ta:.0?} / {tb:.0?}"))?;
    ensure(full_a.total == 36, || format!("{} valid runs", full_a.total))?;
    ensure(full_a == full_b, || format!("distributions differ:\n{}\n{}", full_a.render_table(), full_b.render_table()))?;
    for g in &subs_a.groups {
        let p = g.fisher.map(|f| f.p_value);
        ensure(p == Some(1.0), || format!("subsystem {:?}: Fisher p {p:?}", g.key))?;
    }
    ensure(subs_a == subs_b, || "per-subsystem tables differ".into())?;
    Ok(format!(
        "36 runs in {:.0}s / {:.0}s, identical distributions, per-subsystem Fisher p = 1.0",
        ta.as_secs_f64(),
        tb.as_secs_f64()
    ))
}

fn main() {
    let mut verdicts = vec![
        criterion("derivation-golden", Duration::from_secs(1), derivation_golden),
        criterion("probability-filters", Duration::from_secs(10), probability_filters),
        criterion("codec-properties", Duration::from_secs(30), codec_properties),
        criterion("classifier-goldens", Duration::from_secs(1), classifier_goldens),
        criterion("fisher-oracle", Duration::from_secs(120), fisher_oracle),
    ];

    let started = Instant::now();
    let overhead = proxy_overhead();
    let overhead_time = started.elapsed();
    let interposition = thread::spawn(move || {
        let mut v = criterion("interposition-overhead", Duration::from_secs(300), || fault_free(overhead));
        v.elapsed += overhead_time;
        v
    });
    let demo_a = thread::spawn(demo_run);
    let demo_b = thread::spawn(demo_run);
    let scenarios = thread::spawn(|| {
        vec![
            criterion("service-error-profiles", Duration::from_secs(180), service_error_profiles),
            criterion("sensor-cascade", Duration::from_secs(120), sensor_cascade),
            criterion("stop-activity-anr", Duration::from_secs(120), stop_activity_anr),
        ]
    });
    let demo_started = Instant::now();
    let flatten = |r: thread::Result<Result<_, String>>| r.unwrap_or_else(|_| Err("panicked".into()));
    let (a, b) = (flatten(demo_a.join()), flatten(demo_b.join()));
    verdicts.push(criterion("demo-determinism", Duration::from_secs(1200), || demo_determinism(a, b)));
    verdicts.last_mut().unwrap().elapsed += demo_started.elapsed();
    verdicts.push(interposition.join().expect("interposition thread"));
    verdicts.extend(scenarios.join().expect("scenario thread"));

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
