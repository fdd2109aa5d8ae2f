//! Acceptance suite: one pass/fail line per criterion. Runs without the test
//! harness so the lines are always shown.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use num_rational::Ratio;
use serde_json::json;

use hybrid_smr::adversary::AdversarySpec;
use hybrid_smr::crypto::Digest;
use hybrid_smr::ids::ReplicaId;
use hybrid_smr::protocol::{CounterAcceptance, Mode, MsgKind};
use hybrid_smr::resource_model::{leader_bandwidth_ratio, table1_costs, SizeModel};
use hybrid_smr::sim::explore::{explore, ExploreConfig};
use hybrid_smr::sim::fuzz::{fuzz, FuzzConfig};
use hybrid_smr::sim::{run, RunResult, SimConfig, TraceLevel};
use hybrid_smr::tc::{ContextId, Deployment, Phase, TcConfig, TcError};
use hybrid_smr_cli::{cmd_overhead, cmd_table1, OverheadOpts};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn sim(c: &SimConfig) -> Result<RunResult, String> {
    run(c).map_err(|e| e.to_string())
}

fn scripted(script: &str) -> SimConfig {
    SimConfig {
        adversary: AdversarySpec::named(script),
        trace: TraceLevel::Off,
        ..SimConfig::default()
    }
}

fn overhead_reproduction() -> Outcome {
    let rows = cmd_overhead(&OverheadOpts::default()).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (f, target, tol) in [(10, 0.02, 0.005), (30, 0.05, 0.007)] {
        let r = rows.iter().find(|r| r.f == f).ok_or("missing row")?;
        ensure(r.diff_msgs == 0, format!("f={f}: analytic and simulated counts differ by {}", r.diff_msgs))?;
        ensure(r.analytic_msgs == r.sim_msgs, format!("f={f}: totals differ"))?;
        ensure(
            (r.sim_overhead_msgs - target).abs() <= tol,
            format!("f={f}: overhead {:.4} outside {target}±{tol}", r.sim_overhead_msgs),
        )?;
        out.push(format!("f={f}: {:.2}% ({} msgs, exact)", 100.0 * r.sim_overhead_msgs, r.sim_msgs));
    }
    Ok(out.join("; "))
}

fn zero_overhead_suppression() -> Outcome {
    let mut c = SimConfig {
        pipelining: false,
        requests_per_client: 0,
        duration_ms: 1000.0,
        trace: TraceLevel::Full,
        ..SimConfig::default()
    };
    c.delta_ms = 2.0 * c.network.max_delay_ms;
    let res = sim(&c)?;
    let in_trace = res
        .trace
        .lines()
        .iter()
        .filter(|l| l.contains("\"kind\":\"decision\""))
        .count();
    ensure(res.ops_executed > 100, "too little load")?;
    ensure(in_trace == 0, format!("{in_trace} Decision trace lines"))?;
    ensure(res.tally.kind(MsgKind::Decision).msgs == 0, "Decisions tallied")?;
    // larger n: the evidence that a peer committed is its next Commit, up to
    // three hops away, so the delay needs one more hop of slack
    for f in [2, 3] {
        let wide = SimConfig {
            f,
            delta_ms: 3.0 * c.network.max_delay_ms,
            trace: TraceLevel::Off,
            ..c.clone()
        };
        let n = sim(&wide)?.tally.kind(MsgKind::Decision).msgs;
        ensure(n == 0, format!("f={f}, delta={}ms: {n} Decisions", wide.delta_ms))?;
    }
    Ok(format!(
        "f=1, delta={}ms: 0 Decisions over {} ops; f=2,3 at delta={}ms: 0",
        c.delta_ms,
        res.ops_executed,
        3.0 * c.network.max_delay_ms
    ))
}

fn byte_overheads() -> Outcome {
    let rows = cmd_overhead(&OverheadOpts {
        bytes: true,
        ..OverheadOpts::default()
    })
    .map_err(|e| e.to_string())?;
    let targets = [((10, 256), 0.10), ((30, 256), 0.89), ((10, 1024), 0.03), ((30, 1024), 0.23)];
    let mut out = Vec::new();
    for ((f, tx), want) in targets {
        let r = rows.iter().find(|r| r.f == f && r.tx == tx).ok_or("missing row")?;
        ensure(
            (r.sim_overhead_bytes - want).abs() <= 0.10,
            format!("f={f} tx={tx}: {:.3} vs {want}", r.sim_overhead_bytes),
        )?;
        ensure(
            (r.sim_overhead_bytes - r.analytic_overhead_bytes).abs() < 1e-9,
            format!("f={f} tx={tx}: simulated bytes differ from the model"),
        )?;
        out.push(format!("({f},{tx})={:.1}%", 100.0 * r.sim_overhead_bytes));
    }
    Ok(out.join(" "))
}

fn responsiveness_dichotomy() -> Outcome {
    let mut out = Vec::new();
    for f in [1, 2] {
        let on = sim(&SimConfig { f, ..scripted("silent_repliers") })?;
        ensure(on.verdicts.all_responsive(), format!("f={f}: clients stalled with decisions on"))?;
        let off = sim(&SimConfig {
            f,
            decisions: false,
            ..scripted("silent_repliers")
        })?;
        let stalled = off.verdicts.stalled_clients().len();
        ensure(
            stalled == off.config.clients,
            format!("f={f}: only {stalled} clients stalled with decisions off"),
        )?;
        ensure(
            off.end_time >= off.config.stall_after(),
            "run shorter than the stall threshold",
        )?;
        out.push(format!("f={f}: on completes, off stalls {stalled}/{}", off.config.clients));
    }
    Ok(out.join("; "))
}

fn safety_suite() -> Outcome {
    let start = Instant::now();
    let mut out = Vec::new();
    let cases = [
        (
            AdversarySpec::named("equivocate_withhold")
                .with("x_value", json!(1))
                .with("y_value", json!(3)),
            18,
        ),
        (AdversarySpec::named("gap_forever").with("value", json!(1)), 20),
    ];
    for (spec, steps) in cases {
        let name = spec.script.clone();
        let mut c = ExploreConfig::new(spec);
        c.requests = 1;
        c.max_steps = steps;
        let r = explore(&c);
        ensure(r.violations.is_empty(), format!("{name}: {:?}", r.violations))?;
        ensure(!r.truncated, format!("{name}: state cap reached"))?;
        ensure(r.view_change_states > 0, format!("{name}: no view change reached"))?;
        out.push(format!("{name}: {} states to depth {steps}, 0 violations", r.states));
    }
    let mut runs = 0;
    for script in ["equivocate_withhold", "gap_forever"] {
        for f in [1, 2, 3] {
            let r = fuzz(&FuzzConfig {
                script: script.into(),
                f,
                seeds: 0..1000,
                mode: Mode::Detection,
            });
            ensure(r.violations.is_empty(), format!("{script} f={f}: {:?}", r.violations.first()))?;
            runs += r.runs;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed.as_secs() < 30 * 60, format!("took {elapsed:?}"))?;
    out.push(format!("{runs} random runs, 0 violations ({:.0}s)", elapsed.as_secs_f64()));
    Ok(out.join("; "))
}

fn prevention_impossibility() -> Outcome {
    let mut runs = 0;
    let mut certificates = 0;
    let scripts: [(&str, Vec<(&str, serde_json::Value)>); 5] = [
        ("none", vec![]),
        ("equivocate_withhold", vec![]),
        ("equivocate_withhold", vec![("reveal_both", json!(true))]),
        ("gap_forever", vec![]),
        ("crash_tcs", vec![("restore", json!(true))]),
    ];
    for (script, params) in &scripts {
        for seed in 0..4 {
            let mut c = SimConfig {
                mode: Mode::Prevention,
                pipelining: seed % 2 == 0,
                seed,
                ..scripted(script)
            };
            for (k, v) in params {
                c.adversary = c.adversary.clone().with(k, v.clone());
            }
            let res = sim(&c)?;
            // one certificate per (component instance, context)
            let mut seen: BTreeMap<(ReplicaId, u32, ContextId), Digest> = BTreeMap::new();
            for rec in &res.issued {
                let Some(ctx) = rec.context else { continue };
                if let Some(prev) = seen.insert((rec.tc.replica, rec.tc.epoch, ctx), rec.msg_hash) {
                    return Err(format!("{script}: two certificates for {ctx:?} ({prev} / {})", rec.msg_hash));
                }
            }
            ensure(res.verdicts.safe(), format!("{script}: unsafe"))?;
            certificates += res.issued.len();
            runs += 1;
        }
    }
    let mut dep = Deployment::new(3, TcConfig::default(), 1);
    let ctx = ContextId {
        phase: Phase::Prepare,
        view: 0,
        seq: 1,
    };
    let tc = &mut dep.tcs[0];
    tc.trinx_certify(ctx, Digest([1; 32])).map_err(|e| e.to_string())?;
    match tc.trinx_certify(ctx, Digest([2; 32])) {
        Err(TcError::EquivocationRefused(c)) if c == ctx => {}
        other => return Err(format!("second certify returned {other:?}")),
    }
    Ok(format!("{runs} runs, {certificates} certificates scanned, duplicate refused"))
}

fn counter_identity_dichotomy() -> Outcome {
    let base = SimConfig {
        pipelining: false,
        ..scripted("counter_identity")
    };
    let vulnerable = sim(&SimConfig {
        vulnerable_tc: true,
        counter_acceptance: CounterAcceptance::LeaderAnnounced,
        ..base.clone()
    })?;
    ensure(!vulnerable.verdicts.safe(), "vulnerable component: no violation flagged")?;
    let strict = sim(&SimConfig {
        counter_acceptance: CounterAcceptance::LeaderAnnounced,
        ..base.clone()
    })?;
    ensure(strict.verdicts.safe(), "strict component: violation")?;
    let pinned = sim(&SimConfig {
        vulnerable_tc: true,
        ..base
    })?;
    ensure(pinned.verdicts.safe(), "pinned counters: violation")?;
    Ok(format!(
        "vulnerable: {} findings; strict: safe; pinned: safe",
        vulnerable.verdicts.violations().len()
    ))
}

fn crash_semantics() -> Outcome {
    let crash = |params: serde_json::Value| {
        let mut c = scripted("crash_tcs");
        for (k, v) in params.as_object().expect("object") {
            c.adversary = c.adversary.clone().with(k, v.clone());
        }
        sim(&c)
    };
    let k1 = crash(json!({"k": 1}))?;
    ensure(k1.verdicts.safe() && k1.verdicts.all_responsive(), "k=1 did not complete")?;
    let k2 = crash(json!({"k": 2}))?;
    ensure(k2.verdicts.safe(), "k=2 unsafe")?;
    ensure(!k2.verdicts.live(), "k=2 stayed live")?;
    let restored = crash(json!({"restore": true}))?;
    ensure(
        restored.verdicts.safe() && restored.verdicts.all_responsive() && restored.replicas[2].tc_available,
        "restore did not bring the replica back",
    )?;
    let restarted = crash(json!({"restart_only": true}))?;
    let stale: u64 = restarted.replicas.iter().map(|r| r.tally.stale_epoch_rejections).sum();
    ensure(restarted.verdicts.safe(), "restart unsafe")?;
    ensure(stale > 0, "no StaleEpoch rejection after a plain restart")?;
    Ok(format!("k=1 completes; k=2 stalls safely; restore resumes; restart: {stale} StaleEpoch rejections"))
}

fn table1_and_ratios() -> Outcome {
    let (text, _) = cmd_table1(None, &SizeModel::default());
    let expected = [
        ("Replicas", ["3f+1", "3f+1", "2f+1", "3f+1", "3f+1", "2f+1"]),
        ("Messages handled by leaders", ["≈6f", "≈3f", "≈2f", "≈3f", "≈3f", "≈2f"]),
        ("Asymmetric crypto/replica", ["1+2f", "1+2f", "1+f", "1+1", "1+1", "1+1"]),
        ("Seq. TC access/consensus", ["0", "1", "2", "0", "1", "2"]),
    ];
    for (metric, cells) in expected {
        let line = text
            .lines()
            .find(|l| l.starts_with(metric))
            .ok_or(format!("no row {metric}"))?;
        let got: Vec<&str> = line[metric.len()..].split_whitespace().collect();
        ensure(got == cells, format!("{metric}: {got:?}"))?;
    }
    ensure(leader_bandwidth_ratio(1) == Ratio::new(1, 3), "ratio at f=1")?;
    let far = leader_bandwidth_ratio(1_000_000);
    ensure(
        (*far.numer() as f64 / *far.denom() as f64 - 0.5).abs() < 1e-6,
        "ratio does not approach 1/2",
    )?;
    let min = table1_costs("MinBFT", 1).map_err(|e| e.to_string())?;
    let flexi = table1_costs("FlexiBFT", 1).map_err(|e| e.to_string())?;
    ensure(
        flexi.crypto_per_replica.verifies.per_f == 2 * min.crypto_per_replica.verifies.per_f,
        "verification ratio is not 2",
    )?;
    Ok("six rows match; ratio 1/3 → 1/2; verifications 2:1".into())
}

fn determinism() -> Outcome {
    let mut scenarios: Vec<SimConfig> = ["none", "silent_repliers", "equivocate_withhold", "gap_forever", "crash_tcs"]
        .iter()
        .map(|s| SimConfig {
            trace: TraceLevel::Full,
            ..scripted(s)
        })
        .collect();
    scenarios.push(SimConfig {
        vulnerable_tc: true,
        counter_acceptance: CounterAcceptance::LeaderAnnounced,
        trace: TraceLevel::Full,
        ..scripted("counter_identity")
    });
    scenarios.push(SimConfig {
        mode: Mode::Prevention,
        trace: TraceLevel::Full,
        ..scripted("equivocate_withhold")
    });
    let mut bytes = 0;
    for c in &scenarios {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        sim(c)?.write_outputs(a.path()).map_err(|e| e.to_string())?;
        sim(c)?.write_outputs(b.path()).map_err(|e| e.to_string())?;
        for f in ["trace.jsonl", "summary.json", "tallies.csv", "latencies.csv"] {
            let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
            ensure(x == y, format!("{}: {f} differs", c.adversary.script_name()))?;
            bytes += x.len();
        }
    }
    Ok(format!("{} scenarios run twice, {bytes} bytes identical", scenarios.len()))
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("overhead reproduction", overhead_reproduction),
        ("zero-overhead suppression", zero_overhead_suppression),
        ("byte overheads", byte_overheads),
        ("responsiveness dichotomy", responsiveness_dichotomy),
        ("safety suite", safety_suite),
        ("prevention-mode impossibility", prevention_impossibility),
        ("counter-identity attack dichotomy", counter_identity_dichotomy),
        ("component crash semantics", crash_semantics),
        ("cost table and ratios", table1_and_ratios),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(p.as_ref()))));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2}. {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
