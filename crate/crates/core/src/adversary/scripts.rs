use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use super::{AdvCtx, Adversary, Params, ScriptError, Setup};
use crate::ids::{Endpoint, ReplicaId, Time, MILLIS};
use crate::protocol::{prepare_hash, Batch, Message, Mode, Prepare};
use crate::tc::{ContextId, CounterId, Phase, SnapshotBlob, UniqueIdentifier};

const LEADER: ReplicaId = ReplicaId(0);

fn fingerprint_of(v: impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn pass(to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
    vec![(to, msg)]
}

/// Followers of the view-0 leader split into a first half A (f replicas) and
/// the rest B, unless A is given explicitly.
fn split(p: &Params<'_>, setup: Setup) -> Result<(Vec<ReplicaId>, Vec<ReplicaId>), ScriptError> {
    let followers: Vec<ReplicaId> = (1..setup.n as u32).map(ReplicaId).collect();
    let a = match p.replicas("a")? {
        Some(a) => a,
        None => followers[..setup.f].to_vec(),
    };
    if a.is_empty() || a.iter().any(|r| !followers.contains(r)) {
        return Err(ScriptError::BadParam {
            key: "a".into(),
            reason: "must be a non-empty set of followers".into(),
        });
    }
    let b: Vec<ReplicaId> = followers.into_iter().filter(|r| !a.contains(r)).collect();
    if b.is_empty() {
        return Err(ScriptError::BadParam {
            key: "a".into(),
            reason: "must leave at least one follower out".into(),
        });
    }
    Ok((a, b))
}

/// A batch with the same requests in another order, or the null batch.
fn conflicting(batch: &Batch) -> Batch {
    if batch.len() >= 2 {
        let mut r = batch.requests.as_ref().clone();
        r.reverse();
        Batch::new(r)
    } else {
        Batch::null()
    }
}

fn with_ui(msg: &Message, ui: UniqueIdentifier) -> Message {
    let mut m = msg.clone();
    match &mut m {
        Message::Prepare(p) => p.ui = ui,
        Message::Commit(c) => c.ui = ui,
        Message::Checkpoint(c) => c.ui = ui,
        Message::ViewChange(v) => v.ui = ui,
        Message::NewView(nv) => nv.ui = ui,
        _ => {}
    }
    m
}

fn names(rs: &[ReplicaId]) -> String {
    let v: Vec<String> = rs.iter().map(|r| r.to_string()).collect();
    format!("{{{}}}", v.join(","))
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct NoFaults;

impl NoFaults {
    pub fn build(p: &Params<'_>, _: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        p.check_known(&[])?;
        Ok(Box::new(NoFaults))
    }
}

impl Adversary for NoFaults {
    fn name(&self) -> &'static str {
        "none"
    }

    fn controlled(&self) -> BTreeSet<ReplicaId> {
        BTreeSet::new()
    }

    fn outgoing(&mut self, _: &mut AdvCtx<'_>, _: ReplicaId, to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
        pass(to, msg)
    }

    fn boxed_clone(&self) -> Box<dyn Adversary> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        0
    }
}

// ---------------------------------------------------------------------------

/// Replicas 0..f (including the leader) take part in consensus but never
/// answer clients, and the leader shows its certified messages only to its
/// accomplices and to replica f. The remaining f correct replicas therefore
/// never see a Prepare and can only learn outcomes from Decisions.
#[derive(Clone, Debug)]
pub struct SilentRepliers {
    f: usize,
    dropped_replies: u64,
}

impl SilentRepliers {
    pub fn build(p: &Params<'_>, setup: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        p.check_known(&[])?;
        Ok(Box::new(SilentRepliers {
            f: setup.f,
            dropped_replies: 0,
        }))
    }
}

impl Adversary for SilentRepliers {
    fn name(&self) -> &'static str {
        "silent_repliers"
    }

    fn controlled(&self) -> BTreeSet<ReplicaId> {
        (0..self.f as u32).map(ReplicaId).collect()
    }

    fn start(&mut self, ctx: &mut AdvCtx<'_>) {
        let silent: Vec<ReplicaId> = self.controlled().into_iter().collect();
        let hidden: Vec<ReplicaId> = (self.f as u32 + 1..ctx.setup.n as u32).map(ReplicaId).collect();
        ctx.say(format!(
            "{} will commit but never reply; {LEADER} hides its certified messages from {}",
            names(&silent),
            names(&hidden)
        ));
    }

    fn outgoing(&mut self, _: &mut AdvCtx<'_>, from: ReplicaId, to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
        if matches!(msg, Message::Reply(_)) {
            self.dropped_replies += 1;
            return Vec::new();
        }
        if from == LEADER && msg.ui().is_some() {
            if let Endpoint::Replica(r) = to {
                if r.0 as usize > self.f {
                    return Vec::new();
                }
            }
        }
        pass(to, msg)
    }

    fn boxed_clone(&self) -> Box<dyn Adversary> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_of(self.dropped_replies)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum EqState {
    Waiting,
    /// x went out at this timeline value; y is due at `y_at`.
    Withholding { x: Prepare, y_at: u64 },
}

/// The leader certifies a statement x at timeline value `x_value` and shows
/// it only to followers A. Once its counter has reached `y_value` − 1 it
/// certifies a conflicting y (same seq, other batch) and shows it only to
/// followers B. Values are relative: x is the first Prepare at or beyond
/// `x_value`, y sits `y_value − x_value` values later.
///
/// In prevention mode the conflicting certificate is requested for x's
/// context and refused by the component. Prepare values there advance once
/// per sequence number, so x is taken at value ⌈x_value / 2⌉, the same
/// point of the run.
#[derive(Clone, Debug)]
pub struct EquivocateWithhold {
    a: Vec<ReplicaId>,
    b: Vec<ReplicaId>,
    x_value: u64,
    y_value: u64,
    reveal_both: bool,
    state: EqState,
}

impl EquivocateWithhold {
    pub fn build(p: &Params<'_>, setup: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        p.check_known(&["a", "x_value", "y_value", "reveal_both"])?;
        let (a, b) = split(p, setup)?;
        let x_value = p.u64("x_value", 47)?.max(1);
        let y_value = p.u64("y_value", 55)?;
        if y_value <= x_value {
            return Err(ScriptError::BadParam {
                key: "y_value".into(),
                reason: "must exceed x_value".into(),
            });
        }
        Ok(Box::new(EquivocateWithhold {
            a,
            b,
            x_value,
            y_value,
            reveal_both: p.bool("reveal_both", false)?,
            state: EqState::Waiting,
        }))
    }

    fn audience(&self, side: &[ReplicaId], to: Endpoint) -> bool {
        match to {
            Endpoint::Replica(r) => self.reveal_both || side.contains(&r) || r == LEADER,
            Endpoint::Client(_) => true,
        }
    }

    fn equivocate_detection(&mut self, ctx: &mut AdvCtx<'_>, x: &Prepare) {
        let batch = conflicting(&x.batch);
        let hash = prepare_hash(x.view, x.seq, &batch.digest);
        let Some(q) = ctx.replica(LEADER).timeline_counter() else {
            return;
        };
        match ctx.tc(LEADER).usig_create_ui(&q, hash) {
            Ok(ui) => {
                let value = ui.value;
                let y = Message::Prepare(Prepare {
                    view: x.view,
                    seq: x.seq,
                    batch,
                    ui,
                });
                let targets: Vec<ReplicaId> = if self.reveal_both {
                    (1..ctx.setup.n as u32).map(ReplicaId).collect()
                } else {
                    self.b.clone()
                };
                ctx.say(format!(
                    "{LEADER} certified a conflicting statement y for seq {} at value {value} and showed it to {}",
                    x.seq,
                    names(&targets)
                ));
                for r in targets {
                    ctx.send_to(LEADER, r, y.clone());
                }
            }
            Err(e) => ctx.say(format!("{LEADER} could not certify y: {e}")),
        }
    }

    fn equivocate_prevention(&mut self, ctx: &mut AdvCtx<'_>, x: &Prepare) {
        let batch = conflicting(&x.batch);
        let hash = prepare_hash(x.view, x.seq, &batch.digest);
        let ctx_id = ContextId {
            phase: Phase::Prepare,
            view: x.view,
            seq: x.seq,
        };
        match ctx.tc(LEADER).trinx_certify(ctx_id, hash) {
            Ok(ui) => {
                // never expected; deliver it so the oracles can judge
                let y = Message::Prepare(Prepare {
                    view: x.view,
                    seq: x.seq,
                    batch,
                    ui,
                });
                for r in self.b.clone() {
                    ctx.send_to(LEADER, r, y.clone());
                }
                ctx.say(format!("{LEADER} certified a second statement for seq {}", x.seq));
            }
            Err(e) => ctx.say(format!(
                "{LEADER} asked its component for a conflicting statement for seq {}: {e}",
                x.seq
            )),
        }
    }
}

impl Adversary for EquivocateWithhold {
    fn name(&self) -> &'static str {
        "equivocate_withhold"
    }

    fn controlled(&self) -> BTreeSet<ReplicaId> {
        BTreeSet::from([LEADER])
    }

    fn outgoing(&mut self, ctx: &mut AdvCtx<'_>, from: ReplicaId, to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
        let Some(value) = msg.ui().map(|u| u.value) else {
            return pass(to, msg);
        };
        if from != LEADER {
            return pass(to, msg);
        }
        if self.state == EqState::Waiting {
            if let Message::Prepare(p) = &msg {
                let threshold = match ctx.setup.mode {
                    Mode::Detection => self.x_value,
                    Mode::Prevention => self.x_value.div_ceil(2),
                };
                if value >= threshold {
                    ctx.say(format!(
                        "{LEADER} certified x for seq {} at value {value} and shows it only to {}",
                        p.seq,
                        names(if self.reveal_both { &[] } else { &self.a })
                    ));
                    let x = p.clone();
                    if ctx.setup.mode == Mode::Prevention {
                        self.equivocate_prevention(ctx, &x);
                        // x itself still stays with A, so B waits at that seq
                        self.state = EqState::Withholding { x, y_at: u64::MAX };
                    } else {
                        let y_at = value + (self.y_value - self.x_value);
                        self.state = EqState::Withholding { x, y_at };
                    }
                }
            }
        }
        let mut out = Vec::new();
        if let EqState::Withholding { x, y_at } = self.state.clone() {
            let is_x = matches!(&msg, Message::Prepare(p) if p.ui == x.ui);
            if is_x {
                if self.audience(&self.a.clone(), to) {
                    out.push((to, msg.clone()));
                }
            } else {
                out.push((to, msg.clone()));
            }
            if y_at != u64::MAX && value + 1 >= y_at {
                self.equivocate_detection(ctx, &x);
                // x stays withheld from B
                self.state = EqState::Withholding { x, y_at: u64::MAX };
            }
            return out;
        }
        pass(to, msg)
    }

    fn boxed_clone(&self) -> Box<dyn Adversary> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_of(&self.state)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum CiState {
    Recording,
    Active(CounterId),
    Failed,
}

/// Exploits components that create counters on demand. When the leader is
/// about to propose `trigger_seq`, it opens a second counter q′, replays
/// everything it certified so far on q′ for followers B, and then binds a
/// conflicting proposal T′ to the same value T has on the original counter.
/// Followers A keep seeing the original timeline with T.
#[derive(Clone, Debug)]
pub struct CounterIdentity {
    a: Vec<ReplicaId>,
    b: Vec<ReplicaId>,
    trigger_seq: u64,
    state: CiState,
    history: BTreeMap<u64, Message>,
    /// Original timeline value → the message as re-certified on q′.
    translated: BTreeMap<u64, Message>,
    trigger_value: Option<u64>,
}

impl CounterIdentity {
    pub fn build(p: &Params<'_>, setup: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        p.check_known(&["a", "trigger_seq"])?;
        if setup.mode != Mode::Detection {
            return Err(ScriptError::Unsupported(
                "counter_identity needs detection mode".into(),
            ));
        }
        let (a, b) = split(p, setup)?;
        Ok(Box::new(CounterIdentity {
            a,
            b,
            trigger_seq: p.u64("trigger_seq", 1)?.max(1),
            state: CiState::Recording,
            history: BTreeMap::new(),
            translated: BTreeMap::new(),
            trigger_value: None,
        }))
    }

    fn translate(&mut self, ctx: &mut AdvCtx<'_>, q: CounterId, msg: &Message) -> Option<Message> {
        let value = msg.ui()?.value;
        if let Some(m) = self.translated.get(&value) {
            return Some(m.clone());
        }
        let mut base = msg.clone();
        if Some(value) == self.trigger_value {
            if let Message::Prepare(p) = &mut base {
                p.batch = conflicting(&p.batch);
            }
        }
        let hash = base.certified_hash()?;
        let ui = match ctx.tc(LEADER).usig_create_ui(&q, hash) {
            Ok(ui) => ui,
            Err(e) => {
                ctx.say(format!("{LEADER} failed to certify on the second counter: {e}"));
                return None;
            }
        };
        if Some(value) == self.trigger_value {
            ctx.say(format!(
                "{LEADER} bound T' to value {} on the second counter and sent it to {}",
                ui.value,
                names(&self.b)
            ));
        }
        let m = with_ui(&base, ui);
        self.translated.insert(value, m.clone());
        Some(m)
    }
}

impl Adversary for CounterIdentity {
    fn name(&self) -> &'static str {
        "counter_identity"
    }

    fn controlled(&self) -> BTreeSet<ReplicaId> {
        BTreeSet::from([LEADER])
    }

    fn outgoing(&mut self, ctx: &mut AdvCtx<'_>, from: ReplicaId, to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
        let Some(value) = msg.ui().map(|u| u.value) else {
            return pass(to, msg);
        };
        if from != LEADER {
            return pass(to, msg);
        }
        if self.state == CiState::Recording {
            let trigger = matches!(&msg, Message::Prepare(p) if p.seq == self.trigger_seq);
            if !trigger {
                self.history.entry(value).or_insert_with(|| msg.clone());
                return pass(to, msg);
            }
            match ctx.tc(LEADER).flexi_create_counter() {
                Err(e) => {
                    ctx.say(format!("{LEADER} tried to open a second counter: {e}"));
                    self.state = CiState::Failed;
                    return pass(to, msg);
                }
                Ok(q) => {
                    ctx.say(format!(
                        "{LEADER} opened a second counter {q:?}; T for seq {} at value {value} goes to {}",
                        self.trigger_seq,
                        names(&self.a)
                    ));
                    self.trigger_value = Some(value);
                    self.state = CiState::Active(q);
                    let history: Vec<Message> = std::mem::take(&mut self.history).into_values().collect();
                    for m in &history {
                        if let Some(t) = self.translate(ctx, q, m) {
                            for r in self.b.clone() {
                                ctx.send_to(LEADER, r, t.clone());
                            }
                        }
                    }
                }
            }
        }
        match (&self.state, to) {
            (CiState::Active(q), Endpoint::Replica(r)) if self.b.contains(&r) => {
                let q = *q;
                match self.translate(ctx, q, &msg) {
                    Some(t) => pass(to, t),
                    None => Vec::new(),
                }
            }
            _ => pass(to, msg),
        }
    }

    fn boxed_clone(&self) -> Box<dyn Adversary> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_of((&self.state, self.translated.len(), self.history.len()))
    }
}

// ---------------------------------------------------------------------------

const WAKE_CRASH: u64 = 0;
const WAKE_RECOVER: u64 = 1;

/// Stops the components of `k` replicas at `at_ms`. With `restore`, the first
/// target's component is instead snapshotted by the administrator and later
/// reinstalled into a fresh instance; with `restart_only` that instance
/// starts without the snapshot.
#[derive(Clone)]
pub struct CrashTcs {
    targets: Vec<ReplicaId>,
    at: Time,
    restore: bool,
    restart_only: bool,
    recover_after: Time,
    blob: Option<Arc<Mutex<SnapshotBlob>>>,
}

impl fmt::Debug for CrashTcs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CrashTcs")
            .field("targets", &self.targets)
            .field("at", &self.at)
            .field("restore", &self.restore)
            .field("restart_only", &self.restart_only)
            .finish_non_exhaustive()
    }
}

impl CrashTcs {
    pub fn build(p: &Params<'_>, setup: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        p.check_known(&["k", "at_ms", "targets", "restore", "restart_only", "recover_after_ms"])?;
        let targets = match p.replicas("targets")? {
            Some(t) => t,
            None => {
                let k = p.u64("k", 1)? as usize;
                if k == 0 || k > setup.n {
                    return Err(ScriptError::BadParam {
                        key: "k".into(),
                        reason: format!("must be in 1..={}", setup.n),
                    });
                }
                // spare the initial leader so k ≤ f needs no view change
                (setup.n - k..setup.n).map(|r| ReplicaId(r as u32)).collect()
            }
        };
        if targets.iter().any(|r| r.0 as usize >= setup.n) {
            return Err(ScriptError::BadParam {
                key: "targets".into(),
                reason: "unknown replica".into(),
            });
        }
        let restore = p.bool("restore", false)?;
        let restart_only = p.bool("restart_only", false)?;
        if restore && restart_only {
            return Err(ScriptError::BadParam {
                key: "restart_only".into(),
                reason: "excludes restore".into(),
            });
        }
        Ok(Box::new(CrashTcs {
            targets,
            at: (p.f64("at_ms", 0.0)? * MILLIS as f64) as Time,
            restore,
            restart_only,
            recover_after: (p.f64("recover_after_ms", 100.0)? * MILLIS as f64) as Time,
            blob: None,
        }))
    }

    fn crash(&mut self, ctx: &mut AdvCtx<'_>) {
        for (i, r) in self.targets.clone().into_iter().enumerate() {
            if i == 0 && self.restore {
                let admin = ctx.admin().clone();
                match ctx.tc(r).tc_snapshot(&admin) {
                    Ok(blob) => {
                        self.blob = Some(Arc::new(Mutex::new(blob)));
                        ctx.say(format!("administrator snapshotted and stopped the component of {r}"));
                    }
                    Err(e) => ctx.say(format!("snapshot of {r} failed: {e}")),
                }
            } else {
                ctx.tc(r).crash();
                ctx.say(format!("component of {r} stopped"));
            }
        }
        if self.restore || self.restart_only {
            ctx.wake_at(ctx.now + self.recover_after, WAKE_RECOVER);
        }
    }

    fn recover(&mut self, ctx: &mut AdvCtx<'_>) {
        let r = self.targets[0];
        ctx.tc(r).restart();
        if self.restore {
            let Some(blob) = self.blob.clone() else {
                return;
            };
            let mut blob = blob.lock().expect("snapshot lock");
            match ctx.tc(r).tc_restore(&mut blob) {
                Ok(()) => ctx.say(format!("component of {r} restored from its snapshot")),
                Err(e) => ctx.say(format!("restore of {r} failed: {e}")),
            }
        } else {
            let epoch = ctx.tc(r).identity().epoch;
            ctx.say(format!("component of {r} restarted without its snapshot (epoch {epoch})"));
        }
        ctx.tc_recovered(r);
    }
}

impl Adversary for CrashTcs {
    fn name(&self) -> &'static str {
        "crash_tcs"
    }

    fn controlled(&self) -> BTreeSet<ReplicaId> {
        self.targets.iter().copied().collect()
    }

    fn byzantine(&self) -> BTreeSet<ReplicaId> {
        BTreeSet::new()
    }

    fn start(&mut self, ctx: &mut AdvCtx<'_>) {
        if self.at == 0 {
            self.crash(ctx);
        } else {
            ctx.wake_at(self.at, WAKE_CRASH);
        }
    }

    fn outgoing(&mut self, _: &mut AdvCtx<'_>, _: ReplicaId, to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
        pass(to, msg)
    }

    fn wake(&mut self, ctx: &mut AdvCtx<'_>, tag: u64) {
        match tag {
            WAKE_CRASH => self.crash(ctx),
            WAKE_RECOVER => self.recover(ctx),
            _ => {}
        }
    }

    fn boxed_clone(&self) -> Box<dyn Adversary> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_of((&self.targets, self.blob.is_some()))
    }
}

// ---------------------------------------------------------------------------

/// The leader never sends its certified message at timeline value `value`
/// (in prevention mode: its Prepare with that issuance index).
#[derive(Clone, Debug)]
pub struct GapForever {
    value: u64,
    announced: bool,
}

impl GapForever {
    pub fn build(p: &Params<'_>, _: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        p.check_known(&["value"])?;
        Ok(Box::new(GapForever {
            value: p.u64("value", 47)?.max(1),
            announced: false,
        }))
    }
}

impl Adversary for GapForever {
    fn name(&self) -> &'static str {
        "gap_forever"
    }

    fn controlled(&self) -> BTreeSet<ReplicaId> {
        BTreeSet::from([LEADER])
    }

    fn outgoing(&mut self, ctx: &mut AdvCtx<'_>, from: ReplicaId, to: Endpoint, msg: Message) -> Vec<(Endpoint, Message)> {
        let hit = from == LEADER
            && msg.ui().is_some_and(|u| {
                u.value == self.value
                    && (ctx.setup.mode == Mode::Detection
                        || u.context.is_some_and(|c| c.phase == Phase::Prepare))
            });
        if !hit {
            return pass(to, msg);
        }
        if !self.announced {
            self.announced = true;
            ctx.say(format!("{LEADER} withholds its {:?} at value {} forever", msg.kind(), self.value));
        }
        Vec::new()
    }

    fn boxed_clone(&self) -> Box<dyn Adversary> {
        Box::new(self.clone())
    }

    fn fingerprint(&self) -> u64 {
        fingerprint_of(self.announced)
    }
}
