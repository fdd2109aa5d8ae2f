use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use proptest::prelude::*;

use super::*;
use crate::crypto::Digest;

fn h(i: u64) -> Digest {
    let mut e = Encoder::new("test-hash");
    e.u64(i);
    e.finish()
}

fn deploy(n: usize, mode: CertMode, policy: CounterPolicy) -> Deployment {
    Deployment::new(
        n,
        TcConfig {
            mode,
            policy,
            window: 64,
            audit: true,
        },
        11,
    )
}

fn prepare(view: View, seq: Seq) -> ContextId {
    ContextId {
        phase: Phase::Prepare,
        view,
        seq,
    }
}

#[test]
fn first_ui_has_value_one() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    assert_eq!(tc.usig_create_ui(&q, h(0)).unwrap().value, 1);
}

#[test]
fn conflicting_hashes_get_values_47_and_55() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    for i in 0..46 {
        tc.usig_create_ui(&q, h(100 + i)).unwrap();
    }
    let x = tc.usig_create_ui(&q, h(1)).unwrap();
    for i in 0..7 {
        tc.usig_create_ui(&q, h(200 + i)).unwrap();
    }
    let y = tc.usig_create_ui(&q, h(2)).unwrap();
    assert_eq!((x.value, y.value), (47, 55));
}

#[test]
fn same_hash_twice_gets_distinct_values() {
    let mut d = deploy(1, CertMode::Hmac, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    let a = tc.usig_create_ui(&q, h(9)).unwrap();
    let b = tc.usig_create_ui(&q, h(9)).unwrap();
    assert!(b.value > a.value);
}

#[test]
fn verify_accepts_matching_hash_only() {
    for mode in [CertMode::Sig, CertMode::Hmac] {
        let mut d = deploy(2, mode, CounterPolicy::Strict);
        let q = d.tcs[0].timeline_counter().unwrap();
        let ui = d.tcs[0].usig_create_ui(&q, h(1)).unwrap();
        let reg = d.registry.clone();
        let mut ctx = VerifyContext::new(&reg, Some(&mut d.tcs[1]));
        assert_eq!(usig_verify_ui(&ui, &h(1), &mut ctx), Ok(true));
        assert_eq!(usig_verify_ui(&ui, &h(2), &mut ctx), Ok(false));
        let mut forged = ui.clone();
        forged.value += 1;
        assert_eq!(usig_verify_ui(&forged, &h(1), &mut ctx), Ok(false));
    }
}

#[test]
fn sig_verification_never_touches_the_component() {
    let mut d = deploy(2, CertMode::Sig, CounterPolicy::Strict);
    let q = d.tcs[0].timeline_counter().unwrap();
    let uis: Vec<_> = (0..1000)
        .map(|i| d.tcs[0].usig_create_ui(&q, h(i)).unwrap())
        .collect();
    let reg = d.registry.clone();
    let before = d.tcs[1].access_tally();
    let mut ctx = VerifyContext::new(&reg, Some(&mut d.tcs[1]));
    for (i, ui) in uis.iter().enumerate() {
        assert_eq!(usig_verify_ui(ui, &h(i as u64), &mut ctx), Ok(true));
    }
    assert_eq!(d.tcs[1].access_tally(), before);
}

#[test]
fn hmac_verification_costs_exactly_one_access() {
    let mut d = deploy(2, CertMode::Hmac, CounterPolicy::Strict);
    let q = d.tcs[0].timeline_counter().unwrap();
    let ui = d.tcs[0].usig_create_ui(&q, h(3)).unwrap();
    let reg = d.registry.clone();
    for k in 1..=5u64 {
        let before = d.tcs[1].access_tally();
        let mut ctx = VerifyContext::new(&reg, Some(&mut d.tcs[1]));
        assert_eq!(usig_verify_ui(&ui, &h(3), &mut ctx), Ok(true));
        assert_eq!(d.tcs[1].access_tally(), before + 1, "iteration {k}");
    }
    let mut no_tc = VerifyContext::new(&reg, None);
    assert_eq!(
        usig_verify_ui(&ui, &h(3), &mut no_tc),
        Err(TcError::TcUnavailable)
    );
}

#[test]
fn skip_voids_range() {
    let mut d = deploy(2, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    for i in 0..10 {
        tc.usig_create_ui(&q, h(i)).unwrap();
    }
    let att = tc.usig_skip(&q, 5).unwrap();
    assert_eq!((att.first, att.last), (11, 15));
    assert_eq!(tc.usig_create_ui(&q, h(99)).unwrap().value, 16);
    let reg = d.registry.clone();
    assert_eq!(
        verify_skip(&att, &mut VerifyContext::new(&reg, None)),
        Ok(true)
    );
}

#[test]
fn skip_beyond_window_is_refused() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    assert_eq!(tc.usig_skip(&q, 65), Err(TcError::WindowExceeded));
    tc.usig_skip(&q, 64).unwrap();
    assert_eq!(tc.usig_skip(&q, 1), Err(TcError::WindowExceeded));
    tc.usig_advance_window(&q, 10).unwrap();
    tc.usig_skip(&q, 10).unwrap();
    assert_eq!(
        tc.usig_skip(&q, 0),
        Err(TcError::InvalidArgument("skip count must be positive"))
    );
}

#[test]
fn trinx_refuses_duplicate_context() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    tc.trinx_certify(prepare(1, 1), h(1)).unwrap();
    assert_eq!(
        tc.trinx_certify(prepare(1, 1), h(2)),
        Err(TcError::EquivocationRefused(prepare(1, 1)))
    );
    assert_eq!(
        tc.trinx_certify(prepare(1, 1), h(1)),
        Err(TcError::EquivocationRefused(prepare(1, 1)))
    );
}

#[test]
fn trinx_phases_are_independent() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    tc.trinx_skip(Phase::Prepare, 1, 4).unwrap();
    tc.trinx_skip(Phase::Commit, 1, 4).unwrap();
    tc.trinx_certify(prepare(1, 5), h(1)).unwrap();
    tc.trinx_certify(
        ContextId {
            phase: Phase::Commit,
            view: 1,
            seq: 5,
        },
        h(2),
    )
    .unwrap();
}

#[test]
fn trinx_enforces_seq_order_within_view() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    tc.trinx_certify(prepare(1, 1), h(0)).unwrap();
    tc.trinx_certify(prepare(1, 2), h(0)).unwrap();
    assert!(matches!(
        tc.trinx_certify(prepare(1, 4), h(0)),
        Err(TcError::EquivocationRefused(_))
    ));
    tc.trinx_skip(Phase::Prepare, 1, 3).unwrap();
    tc.trinx_certify(prepare(1, 4), h(0)).unwrap();
    // a later view restarts the per-view order
    tc.trinx_certify(prepare(2, 1), h(0)).unwrap();
    assert!(matches!(
        tc.trinx_certify(prepare(1, 5), h(0)),
        Err(TcError::EquivocationRefused(_))
    ));
}

#[test]
fn trinx_out_of_order_refused_unless_skipped() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    tc.trinx_certify(prepare(0, 1), h(0)).unwrap();
    assert!(tc.trinx_certify(prepare(0, 3), h(0)).is_err());
    tc.trinx_skip(Phase::Prepare, 0, 2).unwrap();
    tc.trinx_certify(prepare(0, 3), h(0)).unwrap();
}

#[test]
fn counter_creation_is_gated_by_policy() {
    let mut strict = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    assert!(matches!(
        strict.tcs[0].flexi_create_counter(),
        Err(TcError::ModeViolation(_))
    ));

    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Vulnerable);
    let tc = &mut d.tcs[0];
    let q = tc.flexi_create_counter().unwrap();
    let q2 = tc.flexi_create_counter().unwrap();
    assert_ne!(q, q2);
    let t = tc.usig_create_ui(&q, h(1)).unwrap();
    let t2 = tc.usig_create_ui(&q2, h(2)).unwrap();
    assert_eq!((t.value, t2.value), (1, 1));
    let reg = d.registry.clone();
    let mut ctx = VerifyContext::new(&reg, None);
    assert_eq!(usig_verify_ui(&t, &h(1), &mut ctx), Ok(true));
    assert_eq!(usig_verify_ui(&t2, &h(2), &mut ctx), Ok(true));
}

#[test]
fn a2m_positions_and_truncation() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    assert_eq!(tc.a2m_append(h(1)).unwrap().0, 1);
    assert_eq!(tc.a2m_append(h(2)).unwrap().0, 2);
    tc.a2m_truncate(2).unwrap();
    assert_eq!(tc.a2m_lookup(1), Err(TcError::Truncated(1)));
    let att = tc.a2m_lookup(2).unwrap();
    assert_eq!(att.msg_hash, h(2));
    assert_eq!(tc.a2m_lookup(3), Err(TcError::NotFound(3)));
    assert!(tc.a2m_truncate(2).is_err());
    let reg = d.registry.clone();
    assert_eq!(
        verify_log(&att, &mut VerifyContext::new(&reg, None)),
        Ok(true)
    );
}

#[test]
fn a2m_window_bound() {
    let mut d = deploy(1, CertMode::Hmac, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    for i in 0..64 {
        tc.a2m_append(h(i)).unwrap();
    }
    assert_eq!(tc.a2m_append(h(0)), Err(TcError::WindowExceeded));
    tc.a2m_truncate(10).unwrap();
    tc.a2m_append(h(0)).unwrap();
}

#[test]
fn snapshot_restore_continues_timeline() {
    let mut d = deploy(2, CertMode::Sig, CounterPolicy::Strict);
    let reg = d.registry.clone();
    let q = d.tcs[0].timeline_counter().unwrap();
    for i in 0..100 {
        d.tcs[0].usig_create_ui(&q, h(i)).unwrap();
    }
    let admin = d.admin.clone();
    let mut blob = d.tcs[0].tc_snapshot(&admin).unwrap();
    assert_eq!(
        d.tcs[0].usig_create_ui(&q, h(0)),
        Err(TcError::TcUnavailable)
    );

    let mut fresh = d.tcs[0].clone();
    fresh.restart();
    fresh.tc_restore(&mut blob).unwrap();
    let ui = fresh.usig_create_ui(&q, h(500)).unwrap();
    assert_eq!(ui.value, 101);
    assert_eq!(
        usig_verify_ui(&ui, &h(500), &mut VerifyContext::new(&reg, None)),
        Ok(true)
    );

    let mut again = d.tcs[0].clone();
    again.restart();
    assert!(matches!(
        again.tc_restore(&mut blob),
        Err(TcError::RestoreRefused(_))
    ));
}

#[test]
fn restore_refused_into_used_component() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let admin = d.admin.clone();
    let mut other = d.tcs[0].clone();
    let mut blob = d.tcs[0].tc_snapshot(&admin).unwrap();
    other.restart();
    other.a2m_append(h(0)).unwrap();
    assert!(matches!(
        other.tc_restore(&mut blob),
        Err(TcError::RestoreRefused(_))
    ));
    assert!(!blob.is_consumed());
}

#[test]
fn snapshot_requires_admin_token() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let bogus = AdminToken([7; 32]);
    assert!(matches!(
        d.tcs[0].tc_snapshot(&bogus),
        Err(TcError::BadAdminToken)
    ));
}

#[test]
fn restart_without_restore_is_a_new_unusable_identity() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let reg = d.registry.clone();
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    tc.usig_create_ui(&q, h(1)).unwrap();
    tc.restart();
    assert_eq!(tc.identity().epoch, 1);
    let q = tc.timeline_counter().unwrap();
    let ui = tc.usig_create_ui(&q, h(2)).unwrap();
    // the new instance starts over at 1, but nobody accepts its certificates
    assert_eq!(ui.value, 1);
    assert_eq!(
        usig_verify_ui(&ui, &h(2), &mut VerifyContext::new(&reg, None)),
        Err(TcError::StaleEpoch)
    );
}

#[test]
fn crashed_component_refuses_everything() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    let q = tc.timeline_counter().unwrap();
    tc.crash();
    assert_eq!(tc.usig_create_ui(&q, h(0)), Err(TcError::TcUnavailable));
    assert_eq!(tc.usig_skip(&q, 1), Err(TcError::TcUnavailable));
    assert_eq!(
        tc.trinx_certify(prepare(0, 1), h(0)),
        Err(TcError::TcUnavailable)
    );
    assert_eq!(tc.a2m_append(h(0)), Err(TcError::TcUnavailable));
    assert_eq!(tc.timeline_counter(), Err(TcError::TcUnavailable));
}

#[test]
fn view_change_certificates_carry_phase_marks() {
    let mut d = deploy(1, CertMode::Sig, CounterPolicy::Strict);
    let tc = &mut d.tcs[0];
    tc.trinx_certify(prepare(0, 1), h(0)).unwrap();
    tc.trinx_certify(prepare(0, 2), h(0)).unwrap();
    let vc = tc
        .trinx_certify(
            ContextId {
                phase: Phase::ViewChange,
                view: 1,
                seq: 1,
            },
            h(5),
        )
        .unwrap();
    let mark = vc.marks.iter().find(|m| m.phase == Phase::Prepare).unwrap();
    assert_eq!((mark.view, mark.seq), (0, 2));
}

// ---------------------------------------------------------------------------
// Exhaustive small-trace model check over the whole interface.

#[derive(Clone, Copy, Debug)]
enum Op {
    Ui(u8, u64),
    Skip(u8, u64),
    Advance(u8),
    Certify(u8, ContextId, u64),
    TrinxSkip(u8, ContextId),
    Append(u8, u64),
    Truncate(u8),
    Lookup(u8, u64),
    Crash(u8),
    Restart(u8),
    Snapshot,
    Restore,
}

fn alphabet() -> Vec<Op> {
    let mut ops = Vec::new();
    let contexts = [prepare(0, 1), prepare(0, 2), prepare(1, 1)];
    for hh in 0..2 {
        ops.push(Op::Ui(0, hh));
        ops.push(Op::Append(0, hh));
        for c in contexts {
            ops.push(Op::Certify(0, c, hh));
        }
        // the second host only matters once it holds a restored timeline
        ops.push(Op::Ui(1, hh));
        ops.push(Op::Certify(1, prepare(0, 2), hh));
        ops.push(Op::Append(1, hh));
    }
    ops.extend([
        Op::Skip(0, 2),
        Op::Advance(0),
        Op::TrinxSkip(0, prepare(0, 1)),
        Op::Truncate(0),
        Op::Lookup(0, 1),
        Op::Lookup(1, 1),
        Op::Crash(0),
        Op::Restart(0),
        Op::Snapshot,
        Op::Restore,
    ]);
    ops
}

type Slot = (TcIdentity, CounterId);

/// Model world: component `a`, a second host `b` (initially a fresh
/// restarted instance of the same replica), and an optional snapshot.
#[derive(Clone)]
struct World {
    tcs: [TrustedComponent; 2],
    blob: Option<SnapshotBlob>,
    /// Highest value issued or voided per (instance, counter).
    used: BTreeMap<Slot, u64>,
    contexts: BTreeSet<(TcIdentity, ContextId)>,
    positions: BTreeMap<TcIdentity, u64>,
    log_hashes: BTreeMap<(TcIdentity, u64), Digest>,
    registry: std::sync::Arc<KeyRegistry>,
}

impl Clone for SnapshotBlob {
    fn clone(&self) -> Self {
        SnapshotBlob {
            sealed: self.sealed.as_ref().map(|s| Sealed {
                identity: s.identity,
                keys: s.keys.clone(),
                state: s.state.clone(),
            }),
        }
    }
}

impl Hash for World {
    fn hash<H: Hasher>(&self, hs: &mut H) {
        self.tcs.hash(hs);
        self.blob
            .as_ref()
            .map(|b| (b.identity(), b.sealed.as_ref().map(|s| s.state.clone())))
            .hash(hs);
        self.used.hash(hs);
        self.contexts.hash(hs);
        self.positions.hash(hs);
        self.log_hashes.hash(hs);
    }
}

impl World {
    fn new() -> World {
        let d = Deployment::new(
            1,
            TcConfig {
                mode: CertMode::Hmac,
                policy: CounterPolicy::Strict,
                window: 4,
                audit: false,
            },
            5,
        );
        let registry = d.registry.clone();
        let a = d.tcs.into_iter().next().unwrap();
        let mut b = a.clone();
        b.restart();
        World {
            tcs: [a, b],
            blob: None,
            used: BTreeMap::new(),
            contexts: BTreeSet::new(),
            positions: BTreeMap::new(),
            log_hashes: BTreeMap::new(),
            registry,
        }
    }

    /// Only certificates of registered instances verify; the others are
    /// unusable and exempt.
    fn record_ui(&mut self, ui: &UniqueIdentifier) -> Result<(), String> {
        if !self.registry.is_registered(&ui.tc) {
            return Ok(());
        }
        let slot = (ui.tc, ui.counter);
        let prev = self.used.get(&slot).copied().unwrap_or(0);
        if ui.value <= prev {
            return Err(format!(
                "value {} reissued on {:?} (max used {prev})",
                ui.value, slot
            ));
        }
        self.used.insert(slot, ui.value);
        if let Some(ctx) = ui.context {
            if !self.contexts.insert((ui.tc, ctx)) {
                return Err(format!("context {ctx:?} certified twice"));
            }
        }
        Ok(())
    }

    fn step(&mut self, op: Op) -> Result<(), String> {
        match op {
            Op::Ui(t, hh) => {
                let tc = &mut self.tcs[t as usize];
                if let Ok(q) = tc.timeline_counter() {
                    if let Ok(ui) = tc.usig_create_ui(&q, h(hh)) {
                        self.record_ui(&ui)?;
                    }
                }
            }
            Op::Skip(t, k) => {
                let tc = &mut self.tcs[t as usize];
                if let Ok(q) = tc.timeline_counter() {
                    if let Some(att) = tc
                        .usig_skip(&q, k)
                        .ok()
                        .filter(|a| self.registry.is_registered(&a.tc))
                    {
                        let slot = (att.tc, att.counter);
                        let prev = self.used.get(&slot).copied().unwrap_or(0);
                        if att.first <= prev {
                            return Err("skip overlaps used values".into());
                        }
                        self.used.insert(slot, att.last);
                    }
                }
            }
            Op::Advance(t) => {
                let tc = &mut self.tcs[t as usize];
                if let Ok(q) = tc.timeline_counter() {
                    let last = tc.counter_value(&q).unwrap_or(0);
                    let _ = tc.usig_advance_window(&q, last);
                }
            }
            Op::Certify(t, ctx, hh) => {
                if let Ok(ui) = self.tcs[t as usize].trinx_certify(ctx, h(hh)) {
                    self.record_ui(&ui)?;
                }
            }
            Op::TrinxSkip(t, ctx) => {
                let tc = &mut self.tcs[t as usize];
                let _ = tc.trinx_skip(ctx.phase, ctx.view, ctx.seq);
                // the skipped contexts count as used
                let id = tc.identity();
                if tc.phase_counter(ctx.phase) == (ctx.view, ctx.seq) {
                    self.contexts.insert((id, ctx));
                }
            }
            Op::Append(t, hh) => {
                let appended = self.tcs[t as usize].a2m_append(h(hh));
                if let Some((pos, att)) = appended
                    .ok()
                    .filter(|(_, a)| self.registry.is_registered(&a.tc))
                {
                    let prev = self.positions.get(&att.tc).copied().unwrap_or(0);
                    if pos <= prev {
                        return Err(format!("position {pos} reassigned"));
                    }
                    self.positions.insert(att.tc, pos);
                    self.log_hashes.insert((att.tc, pos), att.msg_hash);
                }
            }
            Op::Truncate(t) => {
                let tc = &mut self.tcs[t as usize];
                let low = tc.state.log.low;
                let _ = tc.a2m_truncate(low + 1);
            }
            Op::Lookup(t, p) => {
                let found = self.tcs[t as usize].a2m_lookup(p);
                if let Some(att) = found.ok().filter(|a| self.registry.is_registered(&a.tc)) {
                    match self.log_hashes.get(&(att.tc, p)) {
                        Some(d) if *d == att.msg_hash => {}
                        _ => return Err(format!("lookup of {p} returned a forged entry")),
                    }
                }
            }
            Op::Crash(t) => self.tcs[t as usize].crash(),
            Op::Restart(t) => self.tcs[t as usize].restart(),
            Op::Snapshot => {
                if self.blob.is_none() {
                    let admin = admin_token_for(self.tcs[0].keys.shared);
                    if let Ok(b) = self.tcs[0].tc_snapshot(&admin) {
                        self.blob = Some(b);
                    }
                }
            }
            Op::Restore => {
                if let Some(blob) = self.blob.as_mut() {
                    let _ = self.tcs[1].tc_restore(blob);
                }
            }
        }
        Ok(())
    }
}

/// Depth-first search over all call sequences; a state already explored
/// with at least as much remaining depth is not expanded again.
fn explore(w: &World, depth: usize, ops: &[Op], seen: &mut HashMap<u64, usize>, count: &mut u64) {
    if depth == 0 {
        return;
    }
    let mut hs = std::collections::hash_map::DefaultHasher::new();
    w.hash(&mut hs);
    let key = hs.finish();
    if seen.get(&key).is_some_and(|&d| d >= depth) {
        return;
    }
    seen.insert(key, depth);
    for op in ops {
        let mut next = w.clone();
        *count += 1;
        if let Err(e) = next.step(*op) {
            panic!("invariant violated after {op:?}: {e}");
        }
        explore(&next, depth - 1, ops, seen, count);
    }
}

#[test]
fn exhaustive_interface_traces_up_to_length_8() {
    let ops = alphabet();
    let mut seen = HashMap::new();
    let mut count = 0;
    let started = std::time::Instant::now();
    explore(&World::new(), 8, &ops, &mut seen, &mut count);
    eprintln!(
        "explored {count} transitions over {} states in {:?}",
        seen.len(),
        started.elapsed()
    );
    assert!(count > 100_000, "explored only {count} transitions");
}

// ---------------------------------------------------------------------------
// Randomised long traces with real signatures.

fn op_strategy() -> impl Strategy<Value = (u8, u64, u64, u64)> {
    (0u8..8, 0u64..4, 0u64..3, 1u64..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniqueness_and_monotonicity_on_random_traces(trace in prop::collection::vec(op_strategy(), 1..200)) {
        let mut d = Deployment::new(2, TcConfig { mode: CertMode::Sig, policy: CounterPolicy::Strict, window: 16, audit: true }, 3);
        let reg = d.registry.clone();
        let admin = d.admin.clone();
        let mut certs: BTreeMap<(TcIdentity, CounterId, u64), Digest> = BTreeMap::new();
        let mut last_per_counter: BTreeMap<(TcIdentity, CounterId), u64> = BTreeMap::new();
        let mut blob: Option<SnapshotBlob> = None;
        for (kind, a, b, c) in trace {
            let tc = &mut d.tcs[(a % 2) as usize];
            let issued = match kind {
                0 | 1 => tc.timeline_counter().and_then(|q| tc.usig_create_ui(&q, h(a))).ok(),
                2 => { let _ = tc.timeline_counter().and_then(|q| tc.usig_skip(&q, c)); None }
                3 => tc.trinx_certify(ContextId { phase: Phase::ALL[(a % 5) as usize], view: b, seq: c }, h(a)).ok(),
                4 => { let _ = tc.trinx_skip(Phase::Prepare, b, c); None }
                5 => { if a == 3 { tc.restart(); } None }
                6 => { if blob.is_none() && a == 0 { blob = tc.tc_snapshot(&admin).ok(); } None }
                _ => {
                    if let Some(bl) = blob.as_mut() {
                        let _ = d.tcs[1].tc_restore(bl);
                    }
                    None
                }
            };
            if let Some(ui) = issued {
                let last = last_per_counter.entry((ui.tc, ui.counter)).or_insert(0);
                prop_assert!(ui.value > *last);
                *last = ui.value;
                let mut ctx = VerifyContext::new(&reg, None);
                if usig_verify_ui(&ui, &ui.msg_hash, &mut ctx) == Ok(true) {
                    let prev = certs.insert((ui.tc, ui.counter, ui.value), ui.msg_hash);
                    prop_assert!(prev.is_none() || prev == Some(ui.msg_hash));
                }
            }
        }
        // prevention: each context certified at most once per registered instance
        let mut per_ctx: BTreeMap<(TcIdentity, ContextId), usize> = BTreeMap::new();
        for tc in &d.tcs {
            for r in tc.issued_log() {
                if let (Some(ctx), true) = (r.context, reg.is_registered(&r.tc)) {
                    *per_ctx.entry((r.tc, ctx)).or_default() += 1;
                }
            }
        }
        prop_assert!(per_ctx.values().all(|&k| k == 1));
    }
}

// ---------------------------------------------------------------------------
// The public surface of the component is exactly the operations below.

#[test]
fn api_surface_audit() {
    let sources = [
        include_str!("mod.rs"),
        include_str!("cert.rs"),
        include_str!("registry.rs"),
    ];
    let allowed: BTreeSet<&str> = [
        "derive",
        "identity",
        "mode",
        "policy",
        "is_available",
        "access_tally",
        "issued_count",
        "issued_log",
        "timeline_counter",
        "counter_value",
        "flexi_create_counter",
        "usig_create_ui",
        "usig_skip",
        "usig_advance_window",
        "trinx_marks",
        "trinx_certify",
        "trinx_skip",
        "a2m_append",
        "a2m_lookup",
        "a2m_truncate",
        "tc_snapshot",
        "tc_restore",
        "crash",
        "restart",
        "is_consumed",
        "is_registered",
        "announced_counter",
        "new",
        "usig_verify_ui",
        "verify_skip",
        "verify_log",
        "serialize",
        "deserialize",
    ]
    .into_iter()
    .collect();
    let mut found = BTreeSet::new();
    for src in sources {
        for line in src.lines() {
            let t = line.trim_start();
            if let Some(rest) = t.strip_prefix("pub fn ") {
                let name: String = rest
                    .chars()
                    .take_while(|c| c.is_alphanumeric() || *c == '_')
                    .collect();
                found.insert(name);
            }
        }
    }
    let unexpected: Vec<_> = found
        .iter()
        .filter(|n| !allowed.contains(n.as_str()))
        .collect();
    assert!(
        unexpected.is_empty(),
        "unexpected public functions: {unexpected:?}"
    );

    // key material and counter state are never public
    let src = include_str!("mod.rs");
    for field in [
        "keys:",
        "state:",
        "signing:",
        "shared:",
        "counters:",
        "phases:",
    ] {
        assert!(
            !src.contains(&format!("pub {field}")),
            "field {field} is public"
        );
    }
}
