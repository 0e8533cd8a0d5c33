use std::path::Path;

use sirfit_core::analyze::OutcomeKind;
use sirfit_core::campaign::{load_campaign, CampaignConfig};
use sirfit_runtime::runner::{load_journal, run_campaign, RunnerOptions};
use sirfit_runtime::Topology;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)).unwrap()
}

fn demo() -> CampaignConfig {
    let topology = Topology::default();
    load_campaign(&fixture("demo.campaign.toml"), &|t: &str| topology.resolve_target(t)).unwrap()
}

fn expected(plan: &str) -> OutcomeKind {
    match plan {
        "camera/timeliness" | "sensors/timeliness" => OutcomeKind::Anr,
        "phone/timeliness" => OutcomeKind::NoFailure,
        _ => OutcomeKind::Crash,
    }
}

#[test]
fn every_demo_plan_produces_its_outcome() {
    let mut config = demo();
    for p in &mut config.experiments {
        p.repetitions = 1;
        p.warmup_ms = Some(500);
    }
    let out = tempfile::tempdir().unwrap();
    let summary = run_campaign(&config, &RunnerOptions::new(out.path()), &mut |_| {}).unwrap();
    assert_eq!(summary.records.len(), 12);
    let mut wrong = Vec::new();
    for r in &summary.records {
        assert!(r.valid, "{}: {:?}", r.plan_id, r.invalid_reason);
        if r.outcome != expected(&r.plan_id) {
            wrong.push(format!("{} -> {} {:?}", r.plan_id, r.outcome, r.evidence));
        }
    }
    assert!(wrong.is_empty(), "{wrong:#?}");
}

#[test]
fn resume_continues_after_interruption() {
    let mut config = demo();
    config.experiments.truncate(2);
    for p in &mut config.experiments {
        p.warmup_ms = Some(200);
        p.run_ms = Some(600);
        p.trigger = None;
    }
    let out = tempfile::tempdir().unwrap();
    let mut opts = RunnerOptions::new(out.path());
    opts.limit = Some(3);
    let first = run_campaign(&config, &opts, &mut |_| {}).unwrap();
    assert_eq!(first.executed, 3);
    let before = std::fs::read_to_string(out.path().join("journal.jsonl")).unwrap();
    opts.limit = None;
    let second = run_campaign(&config, &opts, &mut |_| {}).unwrap();
    assert_eq!((second.executed, second.resumed), (3, 3));
    let after = std::fs::read_to_string(out.path().join("journal.jsonl")).unwrap();
    assert!(after.starts_with(&before));
    let ids: Vec<String> = load_journal(out.path()).unwrap().into_iter().map(|r| r.run_id).collect();
    assert_eq!(ids.len(), 6);
    let expected: Vec<String> = config.runs().iter().map(|r| r.run_id()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn every_derived_fault_of_the_stack_resolves() {
    use sirfit_core::model::{derive_fault_model, load_architecture};
    let topology = Topology::default();
    let arch = load_architecture(&fixture("simstack.arch.toml")).unwrap();
    let unresolved: Vec<String> = derive_fault_model(&arch)
        .unwrap()
        .iter()
        .filter(|s| topology.binding(s).is_none())
        .map(|s| s.id.clone())
        .collect();
    assert!(unresolved.is_empty(), "{unresolved:?}");
}
