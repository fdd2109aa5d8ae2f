use hybrid_smr::adversary::AdversarySpec;
use hybrid_smr::ids::ReplicaId;
use hybrid_smr::protocol::{CounterAcceptance, Mode, MsgKind};
use hybrid_smr::sim::{run, RunResult, SimConfig, TraceLevel};
use serde_json::json;

fn cfg(script: &str) -> SimConfig {
    SimConfig {
        adversary: AdversarySpec::named(script),
        trace: TraceLevel::Notes,
        ..SimConfig::default()
    }
}

fn go(c: &SimConfig) -> RunResult {
    run(c).expect("valid config")
}

fn cursor(res: &RunResult, r: u32) -> Option<u64> {
    res.replicas[r as usize].leader_cursor
}

#[test]
fn fault_free_run_completes() {
    let res = go(&SimConfig::default());
    assert!(res.verdicts.safe() && res.verdicts.live() && res.verdicts.all_responsive());
    assert_eq!(res.ops_executed, 40);
    assert!(res.quiescent);
    let states: Vec<_> = res.replicas.iter().map(|r| r.state).collect();
    assert!(states.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn silent_repliers_need_decisions() {
    for f in [1, 2] {
        let on = go(&SimConfig { f, ..cfg("silent_repliers") });
        assert!(on.verdicts.all_responsive(), "f={f}");
        assert!(on.tally.kind(MsgKind::Decision).msgs > 0);

        let off = go(&SimConfig { f, decisions: false, ..cfg("silent_repliers") });
        assert!(off.verdicts.safe());
        assert_eq!(off.verdicts.stalled_clients().len(), off.config.clients, "f={f}");
        // the replicas that did see the leader's messages still ordered them
        assert!(off.verdicts.live());
    }
}

#[test]
fn equivocation_freezes_cursors_and_forces_a_view_change() {
    let res = go(&SimConfig { pipelining: false, ..cfg("equivocate_withhold") });
    assert_eq!(cursor(&res, 1), Some(54));
    assert_eq!(cursor(&res, 2), Some(46));
    assert!(res.replicas.iter().all(|r| r.view >= 1));
    assert!(res.verdicts.safe());
    assert!(res.verdicts.all_responsive());
    let story: Vec<&str> = res.narrative.iter().map(|(_, s)| s.as_str()).collect();
    assert!(story.iter().any(|s| s.contains("value 47")), "{story:?}");
    assert!(story.iter().any(|s| s.contains("value 55")), "{story:?}");
}

#[test]
fn revealing_both_statements_gets_the_leader_flagged() {
    let mut c = SimConfig { pipelining: false, ..cfg("equivocate_withhold") };
    c.adversary = c.adversary.with("reveal_both", json!(true));
    let res = go(&c);
    for r in [1, 2] {
        assert!(res.replicas[r].flagged_leader, "r{r}");
        assert_eq!(cursor(&res, r as u32), Some(55));
    }
    assert!(res.verdicts.safe());
}

#[test]
fn prevention_mode_refuses_the_second_statement() {
    let res = go(&SimConfig {
        pipelining: false,
        mode: Mode::Prevention,
        ..cfg("equivocate_withhold")
    });
    assert!(res.verdicts.safe());
    assert!(res.verdicts.all_responsive());
    assert!(res
        .narrative
        .iter()
        .any(|(_, s)| s.contains("already certified")));
    assert!(!res.issued.is_empty());
}

#[test]
fn counter_identity_needs_a_vulnerable_component_and_a_trusting_follower() {
    let base = SimConfig { pipelining: false, ..cfg("counter_identity") };
    let vulnerable = SimConfig {
        vulnerable_tc: true,
        counter_acceptance: CounterAcceptance::LeaderAnnounced,
        ..base.clone()
    };
    assert!(!go(&vulnerable).verdicts.safe());

    let pinned = SimConfig { vulnerable_tc: true, ..base.clone() };
    assert!(go(&pinned).verdicts.safe());

    let strict = SimConfig {
        counter_acceptance: CounterAcceptance::LeaderAnnounced,
        ..base
    };
    let res = go(&strict);
    assert!(res.verdicts.safe());
    assert!(res.narrative.iter().any(|(_, s)| s.contains("not permitted")));
}

#[test]
fn crashed_components() {
    let one = go(&cfg("crash_tcs"));
    assert!(one.verdicts.safe() && one.verdicts.all_responsive());
    assert!(!one.replicas[2].tc_available);

    let mut two = cfg("crash_tcs");
    two.adversary = two.adversary.with("k", json!(2));
    let res = go(&two);
    assert!(res.verdicts.safe());
    assert!(!res.verdicts.live());
    assert_eq!(res.ops_executed, 0);
}

#[test]
fn snapshot_restore_and_plain_restart() {
    let mut restore = cfg("crash_tcs");
    restore.adversary = restore.adversary.with("restore", json!(true));
    let res = go(&restore);
    assert!(res.verdicts.safe() && res.verdicts.all_responsive());
    assert!(res.replicas[2].tc_available);
    assert!(res.replicas[2].certificates_issued > 0);

    let mut restart = cfg("crash_tcs");
    restart.adversary = restart.adversary.with("restart_only", json!(true));
    let res = go(&restart);
    assert!(res.verdicts.safe());
    let stale: u64 = res
        .replicas
        .iter()
        .filter(|r| r.id != ReplicaId(2))
        .map(|r| r.tally.stale_epoch_rejections)
        .sum();
    assert!(stale > 0);
}

#[test]
fn vulnerable_component_only_with_counter_identity() {
    let bad = SimConfig { vulnerable_tc: true, ..cfg("equivocate_withhold") };
    assert!(bad.validate().is_err());
}

#[test]
fn reruns_are_identical() {
    for script in ["none", "equivocate_withhold", "crash_tcs"] {
        let c = SimConfig { trace: TraceLevel::Full, ..cfg(script) };
        let a = go(&c);
        let b = go(&c);
        assert_eq!(a.trace.lines(), b.trace.lines(), "{script}");
        assert_eq!(a.summary_json(), b.summary_json(), "{script}");
    }
    let other = go(&SimConfig { seed: 43, ..SimConfig::default() });
    assert_ne!(other.trace.lines(), go(&SimConfig::default()).trace.lines());
}

#[test]
fn partitions_delay_but_do_not_break_agreement() {
    let mut c = SimConfig::default();
    c.network.partitions.push(hybrid_smr::sim::Partition {
        start_ms: 5.0,
        end_ms: 300.0,
        groups: vec![vec![2]],
    });
    let res = go(&c);
    assert!(res.verdicts.safe());
    assert!(res.verdicts.all_responsive());
    assert!(res.tally.held > 0);
}
