use proptest::prelude::*;
use sirfit_core::analyze::{
    classify, distribution, fisher_exact_2x2, fisher_exact_rxc, parse_line, parse_log, ClassifiedRecord,
    ContingencyTable, LogLine, OutcomeKind, Severity, DEFAULT_BUDGET,
};

/// Hypergeometric probability of the 2x2 table with top-left `a`, from
/// binomial coefficients computed in exact integers.
fn hypergeometric(a: u64, r0: u64, c0: u64, n: u64) -> f64 {
    fn choose(n: u64, k: u64) -> u128 {
        (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
    }
    choose(r0, a) as f64 * choose(n - r0, c0 - a) as f64 / choose(n, c0) as f64
}

fn oracle_2x2(t: [[u64; 2]; 2]) -> f64 {
    let (r0, c0) = (t[0][0] + t[0][1], t[0][0] + t[1][0]);
    let n = r0 + t[1][0] + t[1][1];
    let lo = c0.saturating_sub(n - r0);
    let hi = r0.min(c0);
    let observed = hypergeometric(t[0][0], r0, c0, n);
    (lo..=hi)
        .map(|a| hypergeometric(a, r0, c0, n))
        .filter(|p| *p <= observed * (1.0 + 1e-7))
        .sum::<f64>()
        .min(1.0)
}

#[test]
fn known_two_by_two_values() {
    // Lady tasting tea.
    let p = fisher_exact_2x2([[3, 1], [1, 3]]).unwrap();
    assert!((p - 0.4857142857142857).abs() < 1e-12, "{p}");
    assert_eq!(fisher_exact_2x2([[5, 5], [5, 5]]).unwrap(), 1.0);
    assert!(fisher_exact_2x2([[-1, 0], [0, 0]]).is_err());
}

#[test]
fn identical_rows_give_one() {
    for row in [vec![3, 0, 0, 0], vec![1, 1, 1, 0], vec![0, 2, 0, 1]] {
        let t = ContingencyTable::new(vec![row.clone(); 3]).unwrap();
        assert_eq!(fisher_exact_rxc(&t, DEFAULT_BUDGET).p_value, 1.0, "{row:?}");
    }
}

fn line(sev: Severity, tag: &str, message: &str) -> LogLine {
    LogLine {
        timestamp_ms: 1,
        pid: 2,
        tid: 3,
        severity: sev,
        tag: tag.into(),
        message: message.into(),
    }
}

fn severity() -> impl Strategy<Value = Severity> {
    prop::sample::select(vec![Severity::V, Severity::D, Severity::I, Severity::W, Severity::E, Severity::A, Severity::F])
}

fn log_line() -> impl Strategy<Value = LogLine> {
    let message = prop_oneof![
        "[a-z ]{0,30}",
        Just("FATAL EXCEPTION: main".to_string()),
        Just("ANR in com.example.app".to_string()),
        Just("ANR in ".to_string()),
    ];
    (any::<u64>(), any::<u32>(), any::<u32>(), severity(), "[A-Za-z]{1,12}", message).prop_map(
        |(timestamp_ms, pid, tid, severity, tag, message)| LogLine {
            timestamp_ms,
            pid,
            tid,
            severity,
            tag,
            message,
        },
    )
}

/// Outcome ranks from the rules, most severe last.
fn oracle_outcome(lines: &[LogLine]) -> OutcomeKind {
    let mut best = OutcomeKind::NoFailure;
    for l in lines {
        let kinds = [
            (l.message.contains("FATAL EXCEPTION"), OutcomeKind::Crash),
            (l.message.contains("ANR in ") && !l.message.ends_with("ANR in "), OutcomeKind::Anr),
            (matches!(l.severity, Severity::A | Severity::F), OutcomeKind::Fatal),
        ];
        for (hit, k) in kinds {
            if hit && k > best {
                best = k;
            }
        }
    }
    best
}

#[test]
fn outcome_order() {
    assert!(OutcomeKind::NoFailure < OutcomeKind::Fatal);
    assert!(OutcomeKind::Fatal < OutcomeKind::Anr);
    assert!(OutcomeKind::Anr < OutcomeKind::Crash);
    let only_fatal = classify(&parse_log(&format!("{}\n", line(Severity::F, "libc", "Fatal signal 6"))));
    assert_eq!(only_fatal.primary, OutcomeKind::Fatal);
}

fn record(plan: &str, rep: u32, outcome: OutcomeKind) -> ClassifiedRecord {
    ClassifiedRecord {
        plan_id: plan.into(),
        repetition: rep,
        profile: "fragile".into(),
        subsystem: plan.split('/').next().unwrap().into(),
        mode: plan.split('/').nth(1).unwrap().into(),
        persistence: "permanent".into(),
        outcome,
        valid: true,
    }
}

#[test]
fn distribution_counts_and_fisher() {
    let mut records = Vec::new();
    for rep in 0..3 {
        records.push(record("camera/availability", rep, OutcomeKind::Crash));
        records.push(record("camera/timeliness", rep, OutcomeKind::Anr));
    }
    let mut bad = record("camera/availability", 3, OutcomeKind::Crash);
    bad.valid = false;
    records.push(bad);
    let report = distribution(&records, &["subsystem"]).unwrap();
    assert_eq!(report.total, 6);
    assert_eq!(report.invalid, vec![("camera/availability".to_string(), 3)]);
    let g = &report.groups[0];
    assert_eq!(g.total, 6);
    assert_eq!(g.counts.iter().sum::<u64>(), 6);
    assert_eq!(g.fisher.unwrap().p_value, 1.0);
    assert!(distribution(&records, &["colour"]).is_err());
    assert!(distribution(&[], &["subsystem"]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn two_by_two_matches_hypergeometric_oracle(t in any::<[[u8; 2]; 2]>().prop_map(|t| t.map(|r| r.map(|x| u64::from(x % 13))))) {
        prop_assume!(t.iter().flatten().sum::<u64>() > 0);
        let p = fisher_exact_2x2(t.map(|r| r.map(|x| x as i64))).unwrap();
        let want = oracle_2x2(t);
        prop_assert!((p - want).abs() <= 1e-10, "{:?}: {} vs {}", t, p, want);
        prop_assert!((0.0..=1.0).contains(&p));
        let rxc = fisher_exact_rxc(&ContingencyTable::new(t.iter().map(|r| r.iter().map(|&x| x as i64).collect()).collect()).unwrap(), DEFAULT_BUDGET);
        prop_assert!((rxc.p_value - want).abs() <= 1e-10);
    }

    #[test]
    fn fisher_is_invariant_under_row_and_column_swaps(rows in prop::collection::vec(prop::collection::vec(0i64..4, 3), 3)) {
        prop_assume!(rows.iter().flatten().sum::<i64>() > 0);
        let p = fisher_exact_rxc(&ContingencyTable::new(rows.clone()).unwrap(), DEFAULT_BUDGET).p_value;
        let mut swapped = rows.clone();
        swapped.swap(0, 2);
        for r in &mut swapped {
            r.swap(0, 1);
        }
        let q = fisher_exact_rxc(&ContingencyTable::new(swapped).unwrap(), DEFAULT_BUDGET).p_value;
        prop_assert!((p - q).abs() <= 1e-12, "{} vs {}", p, q);
        let t: Vec<Vec<i64>> = (0..3).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let transposed = fisher_exact_rxc(&ContingencyTable::new(t).unwrap(), DEFAULT_BUDGET).p_value;
        prop_assert!((p - transposed).abs() <= 1e-12);
    }

    #[test]
    fn log_lines_round_trip(l in log_line()) {
        prop_assert_eq!(parse_line(&l.to_string()), Some(l));
    }

    #[test]
    fn classification_follows_precedence(lines in prop::collection::vec(log_line(), 0..12)) {
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        let outcome = classify(&parse_log(&text));
        prop_assert_eq!(outcome.primary, oracle_outcome(&lines));
        prop_assert_eq!(outcome.all_observed.iter().next_back().copied().unwrap_or(OutcomeKind::NoFailure), outcome.primary);
        prop_assert_eq!(outcome.evidence.is_empty(), outcome.primary == OutcomeKind::NoFailure);
    }

    #[test]
    fn garbage_lines_are_ignored(noise in prop::collection::vec("[^\n]{0,40}", 0..8), l in log_line()) {
        let mut text: String = noise.iter().filter(|n| parse_line(n).is_none()).map(|n| format!("{n}\n")).collect();
        text += &format!("{l}\n");
        prop_assert_eq!(classify(&parse_log(&text)).primary, oracle_outcome(std::slice::from_ref(&l)));
    }
}
