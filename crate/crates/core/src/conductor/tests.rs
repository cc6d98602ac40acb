use proptest::prelude::*;

use super::*;
use crate::phase1::ewoc_next_dose;

fn at(sec: i64) -> Command {
    Command::new("coordinator", DateTime::from_timestamp(1_700_000_000 + sec, 0).unwrap())
}

fn range_config(th: Option<Thresholds>) -> TrialConfig {
    TrialConfig {
        analysis: AnalysisSpec::parametric(),
        domain: DoseDomain::Range {
            x_min: 140.0,
            x_max: 425.0,
        },
        phase1: Phase1Config {
            n_rho: 31,
            n_eta: 31,
            ..Phase1Config::ewoc(4)
        },
        groups: vec![3, 3],
        thresholds: th,
        policy: MtdPolicy::Updating,
        estimator: Estimator::Mle,
        delta: 1e-4,
        seed: 0,
        stream: 0,
    }
}

fn grid_config() -> TrialConfig {
    TrialConfig {
        analysis: AnalysisSpec::isotonic(false),
        domain: DoseDomain::Grid {
            levels: vec![140.0, 200.0, 250.0, 300.0],
        },
        phase1: Phase1Config::uniform_grid(4),
        seed: 11,
        ..range_config(Some(Thresholds::new(0.5, 2.0, 0.1, 0.1, 0.3)))
    }
}

fn thresholds() -> Thresholds {
    Thresholds::new(0.5, 50.0, 0.2, 0.1, 0.3)
}

/// Enrolls the next patient and records their outcome.
fn step(s: &TrialState, y: bool, z: bool, log: &mut Vec<Event>) -> TrialState {
    let t = s.n_events as i64;
    let a = enroll(s, s.version, &at(t)).unwrap();
    log.extend(a.events);
    let b = record_outcome(&a.state, s.completed(), y, z, a.state.version, &at(t + 1)).unwrap();
    log.extend(b.events);
    b.state
}

fn start(cfg: TrialConfig) -> (TrialState, Vec<Event>) {
    let a = create_trial("t1", cfg, &at(0)).unwrap();
    (a.state, a.events)
}

#[test]
fn first_ewoc_dose_is_prior_quantile() {
    let cfg = range_config(Some(thresholds()));
    let (s, _) = start(cfg.clone());
    let prior = cfg.phase1.prior(&cfg.domain).unwrap();
    assert_eq!(s.recommendation, Some(ewoc_next_dose(&prior, cfg.phase1.omega)));
    assert_eq!(s.phase, Phase::PhaseI);
    assert_eq!(s.version, 1);
}

#[test]
fn grid_doses_stay_on_the_grid() {
    let cfg = grid_config();
    let levels = cfg.domain.grid().unwrap().levels;
    let (mut s, mut log) = start(cfg);
    for i in 0..10 {
        if s.phase == Phase::Terminated {
            break;
        }
        assert!(levels.contains(&s.recommendation.unwrap()));
        s = step(&s, i % 3 == 0, i % 2 == 0, &mut log);
    }
    assert!(s.doses.iter().all(|d| levels.contains(d)));
}

#[test]
fn missing_thresholds_are_reported_by_field() {
    let err = create_trial("t", range_config(None), &at(0)).unwrap_err();
    let ConductorError::InvalidConfig(fields) = err else {
        panic!("expected InvalidConfig")
    };
    assert_eq!(fields.len(), 1);
    assert_eq!(fields[0].field, "thresholds");
    let mut bad = range_config(Some(thresholds()));
    bad.groups = vec![];
    bad.delta = -1.0;
    let ConductorError::InvalidConfig(fields) = create_trial("t", bad, &at(0)).unwrap_err() else {
        panic!()
    };
    let names: Vec<_> = fields.iter().map(|f| f.field.as_str()).collect();
    assert_eq!(names, ["groups", "delta"]);
}

#[test]
fn phase1_closeout_starts_phase2() {
    let (mut s, mut log) = start(range_config(Some(thresholds())));
    for y in [false, false, true, false] {
        assert_eq!(s.phase, Phase::PhaseI);
        s = step(&s, y, false, &mut log);
    }
    assert_eq!(s.phase, Phase::PhaseII);
    assert_eq!(s.current_k, 1);
    let est = s.phase1.clone().unwrap();
    let init = s.initial_mtd.unwrap();
    assert_eq!(init.eta, est.eta_mle);
    assert_eq!(s.recommendation, Some(init.eta));
    assert_eq!(s.verdicts.len(), 1);
    assert_eq!(s.verdicts[0].verdict, Verdict::Continue);
}

#[test]
fn crossing_the_efficacy_bound_terminates() {
    let (mut s, mut log) = start(range_config(Some(thresholds())));
    for y in [false, false, true, false] {
        s = step(&s, y, false, &mut log);
    }
    for _ in 0..3 {
        s = step(&s, false, true, &mut log);
    }
    let a = s.analyses.last().unwrap();
    assert!(a.stats.l0 >= 0.5 && a.stats.p_hat > 0.1);
    assert_eq!(a.decision.verdict, Verdict::RejectH0);
    assert_eq!(s.phase, Phase::Terminated);
    assert_eq!(s.terminal_verdict().unwrap().k, 1);
    assert_eq!(s.recommendation, None);
    let n = s.completed();
    assert_eq!(
        record_outcome(&s, n, false, false, s.version, &at(99)).unwrap_err(),
        ConductorError::AlreadyTerminated
    );
    assert_eq!(enroll(&s, s.version, &at(99)).unwrap_err(), ConductorError::AlreadyTerminated);
}

#[test]
fn duplicate_submission_is_a_no_op() {
    let (s, _) = start(range_config(Some(thresholds())));
    let s = enroll(&s, 1, &at(1)).unwrap().state;
    let first = record_outcome(&s, 0, true, false, s.version, &at(2)).unwrap();
    let again = record_outcome(&first.state, 0, true, false, s.version, &at(3)).unwrap();
    assert!(again.events.is_empty());
    assert_eq!(again.state, first.state);
    // Same patient with different values is not a duplicate.
    assert!(matches!(
        record_outcome(&first.state, 0, false, false, s.version, &at(3)),
        Err(ConductorError::OutOfOrder { expected: 1, got: 0 })
    ));
}

#[test]
fn concurrency_and_order_errors() {
    let (s, _) = start(range_config(Some(thresholds())));
    assert_eq!(
        enroll(&s, 0, &at(1)).unwrap_err(),
        ConductorError::VersionConflict { expected: 0, actual: 1 }
    );
    assert_eq!(
        record_outcome(&s, 0, false, false, 1, &at(1)).unwrap_err(),
        ConductorError::NotEnrolled(0)
    );
    let s = enroll(&s, 1, &at(1)).unwrap().state;
    assert_eq!(enroll(&s, 2, &at(2)).unwrap_err(), ConductorError::EnrollmentClosed);
    assert_eq!(
        record_outcome(&s, 1, false, false, 2, &at(2)).unwrap_err(),
        ConductorError::OutOfOrder { expected: 0, got: 1 }
    );
    assert!(matches!(
        record_outcome(&s, 0, false, false, 1, &at(2)),
        Err(ConductorError::VersionConflict { .. })
    ));
}

#[test]
fn phase2_group_enrolls_together() {
    let (mut s, mut log) = start(range_config(Some(thresholds())));
    for y in [false, true, false, false] {
        s = step(&s, y, false, &mut log);
    }
    let dose = s.recommendation.unwrap();
    for _ in 0..3 {
        s = enroll(&s, s.version, &at(50)).unwrap().state;
    }
    assert_eq!(enroll(&s, s.version, &at(51)).unwrap_err(), ConductorError::EnrollmentClosed);
    assert!(s.doses[4..].iter().all(|&d| d == dose));
    let r = trial_report(&s, &[]).unwrap();
    assert_eq!(r.progress.awaiting, vec![4, 5, 6]);
    assert!(!r.progress.can_enroll);
}

#[test]
fn replay_reproduces_state() {
    let (mut s, mut log) = start(range_config(Some(Thresholds::new(f64::INFINITY, f64::INFINITY, 0.5, 0.1, 0.3))));
    let outcomes = [(false, true), (true, false), (false, false), (true, true), (false, true), (false, false)];
    for (i, &(y, z)) in outcomes.iter().cycle().take(10).enumerate() {
        s = step(&s, y, z, &mut log);
        assert_eq!(replay(&log).unwrap(), s, "after patient {i}");
    }
    assert_eq!(s.phase, Phase::Terminated);
    let json: Vec<String> = log.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    let back: Vec<Event> = json.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(replay(&back).unwrap(), s);
    assert!(log.windows(2).all(|w| w[0].version <= w[1].version && w[1].seq == w[0].seq + 1));
}

#[test]
fn store_round_trip_with_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let store = JsonlStore::open(dir.path()).unwrap();
    let mut cfg = range_config(Some(Thresholds::new(f64::INFINITY, f64::INFINITY, 0.5, 0.1, 0.3)));
    cfg.groups = vec![10, 10];
    let (mut s, log) = start(cfg);
    store.create("t1", &log).unwrap();
    assert!(matches!(store.create("t1", &log), Err(StoreError::Exists(_))));
    assert!(matches!(store.create("../x", &log), Err(StoreError::InvalidId(_))));
    for i in 0..24 {
        let mut ev = Vec::new();
        s = step(&s, i % 4 == 1, i % 2 == 0, &mut ev);
        store.append(&s, &ev).unwrap();
    }
    assert!(s.n_events > store::SNAPSHOT_EVERY);
    assert!(dir.path().join("t1.snapshot.json").exists());
    let (loaded, events) = store.load("t1").unwrap();
    assert_eq!(loaded, s);
    assert_eq!(replay(&events).unwrap(), s);
    assert_eq!(store.list().unwrap(), vec!["t1".to_string()]);
    assert!(matches!(store.load("nope"), Err(StoreError::NotFound(_))));
}

#[test]
fn amendment_keeps_decisions_and_logs_advisory() {
    let (mut s, mut log) = start(range_config(Some(thresholds())));
    for y in [false, false, true, false] {
        s = step(&s, y, false, &mut log);
    }
    for _ in 0..3 {
        s = step(&s, false, true, &mut log);
    }
    assert_eq!(s.phase, Phase::Terminated);
    let verdicts = s.verdicts.clone();
    let a = amend_outcome(&s, 5, false, false, "source data verification", s.version, &at(200)).unwrap();
    let s2 = a.state;
    assert_eq!(s2.verdicts, verdicts);
    assert!(!s2.data.records[5].z);
    assert_eq!(s2.advisories.len(), 1);
    let adv = &s2.advisories[0];
    assert_eq!(adv.k, 1);
    let AnalysisRecord::Interim(re) = &adv.recomputed else { panic!() };
    let expected = run_analysis(
        &s2.config.analysis,
        &s2.config.domain,
        &s2.data,
        estimate_mtd(&s2.config.analysis, &s2.config.domain, 1.0 / 3.0, &s2.data).unwrap(),
        1,
        2,
        &thresholds(),
    )
    .unwrap();
    assert_eq!(re, &expected);
    assert_eq!(adv.verdict_changed, re.decision.verdict != Verdict::RejectH0);
    // A Phase I change re-runs the close-out too.
    let b = amend_outcome(&s2, 0, true, false, "typo", s2.version, &at(201)).unwrap();
    assert_eq!(b.state.advisories.iter().map(|a| a.k).collect::<Vec<_>>(), vec![1, 0, 1]);
    log.extend(a.events);
    log.extend(b.events);
    assert_eq!(replay(&log).unwrap(), b.state);
    assert!(amend_outcome(&b.state, 0, true, false, "again", b.state.version, &at(202)).is_err());
    assert!(amend_outcome(&b.state, 40, true, false, "x", b.state.version, &at(202)).is_err());
}

#[test]
fn phase1_amendment_refreshes_recommendation() {
    let cfg = range_config(Some(thresholds()));
    let (mut s, mut log) = start(cfg.clone());
    s = step(&s, false, false, &mut log);
    s = step(&s, false, false, &mut log);
    let a = amend_outcome(&s, 1, true, false, "late toxicity", s.version, &at(30)).unwrap();
    let mut post = cfg.phase1.prior(&cfg.domain).unwrap();
    post.update_all(&a.state.data).unwrap();
    assert_eq!(a.state.recommendation, Some(ewoc_dose_in(&cfg.domain, &post, cfg.phase1.omega)));
    assert!(a.state.recommendation < s.recommendation);
}

#[test]
fn thresholds_amendable_until_first_interim() {
    let (mut s, mut log) = start(range_config(Some(thresholds())));
    let new = Thresholds::new(3.0, 3.5, 0.7, 0.1, 0.3);
    s = amend_thresholds(&s, new.clone(), "calibrated", s.version, &at(1)).unwrap().state;
    assert_eq!(s.config.thresholds, Some(new.clone()));
    for y in [false, false, true, false, false, false, false] {
        s = step(&s, y, false, &mut log);
    }
    assert!(!s.analyses.is_empty() || s.phase == Phase::Terminated);
    assert!(amend_thresholds(&s, new, "late", s.version, &at(9)).is_err());
}

#[test]
fn report_matches_seqtest_and_what_if_is_read_only() {
    let (s0, log0) = start(range_config(Some(thresholds())));
    let r = trial_report(&s0, &log0).unwrap();
    assert!(r.estimates.is_none() && r.latest.is_none() && r.terminal.is_none());
    assert_eq!(r.audit.len(), 1);

    let mut log = log0.clone();
    let mut s = s0.clone();
    for (y, z) in [(false, false), (true, false), (false, true), (false, false), (false, true), (true, false), (false, false)] {
        s = step(&s, y, z, &mut log);
    }
    let r = trial_report(&s, &log).unwrap();
    let cfg = &s.config;
    let tau = cfg.schedule().tau(1);
    let mtd = estimate_mtd(&cfg.analysis, &cfg.domain, cfg.phase1.q, &s.data.head(tau)).unwrap();
    let direct = run_analysis(&cfg.analysis, &cfg.domain, &s.data.head(tau), mtd, 1, 2, &thresholds()).unwrap();
    assert_eq!(r.latest.as_ref(), Some(&direct.decision));
    assert!(matches!(r.estimates, Some(CurveEstimates::Parametric { .. })));

    let w = what_if(&s0, &[(false, false); 12]).unwrap();
    assert!(w.steps.len() <= 10);
    assert_eq!(w.steps[0].dose, s0.recommendation.unwrap());
    assert!(w.steps.iter().any(|st| st.verdict.is_some()));
    assert_eq!(trial_report(&s0, &log0).unwrap(), trial_report(&s0, &log0).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn versions_increase_and_one_terminal_verdict(outcomes in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..14)) {
        let (mut s, mut log) = start(range_config(Some(Thresholds::new(2.0, 2.0, 0.5, 0.1, 0.3))));
        for (y, z) in outcomes {
            if s.phase == Phase::Terminated {
                break;
            }
            let before = s.version;
            s = step(&s, y, z, &mut log);
            prop_assert!(s.version > before);
        }
        let terminal = s.verdicts.iter().filter(|v| v.verdict.is_terminal()).count();
        prop_assert_eq!(terminal, (s.phase == Phase::Terminated) as usize);
        prop_assert_eq!(replay(&log).unwrap(), s.clone());
        let expected_k = match s.phase {
            Phase::PhaseI => 0,
            _ => s.config.schedule().analysis_at(s.completed()).map_or(s.current_k, |k| k),
        };
        prop_assert!(s.current_k == expected_k || s.current_k == expected_k + 1);
    }
}
