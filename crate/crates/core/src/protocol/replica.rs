use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::messages::*;
use super::service::KvService;
use super::viewchange::{Checker, NewViewPlan};
use super::{Action, CommitPath, CounterAcceptance, Mode, Note, ProtocolConfig, Timer};
use crate::crypto::{ClientDirectory, Digest, Encoder};
use crate::ids::{ClientId, Endpoint, Ignored, ReplicaId, Seq, Time, View};
use crate::tc::{
    ContextId, CounterId, KeyRegistry, Phase, TcError, TrustedComponent, UniqueIdentifier,
};

/// Far-future timeline values are dropped rather than buffered.
const MAX_BUFFERED_AHEAD: u64 = 100_000;

/// Per-replica resource counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaTally {
    pub ui_created: u64,
    pub ui_verified: u64,
    pub client_sigs_verified: u64,
    pub decisions_sent: u64,
    pub decisions_suppressed: u64,
    pub decisions_ignored: u64,
    /// Certificates rejected because they came from an unregistered component instance.
    pub stale_epoch_rejections: u64,
}

/// Ordering state for one sender's certified timeline (detection mode).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct Inbound {
    counter: Option<CounterId>,
    cursor: u64,
    buffer: BTreeMap<u64, Message>,
    gap_reported: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct Slot {
    /// Digest of the admitted leader prepare, per view.
    prepared: BTreeMap<View, Digest>,
    votes: BTreeMap<(View, Digest), BTreeMap<ReplicaId, Attestation>>,
    committed: Option<(View, Digest)>,
    proof: Vec<Attestation>,
    /// Peers known to have committed this seq.
    decided: BTreeSet<ReplicaId>,
    decision_done: bool,
    /// Views in which this replica still owes a Commit (its component was down).
    owed_commit: BTreeSet<View>,
    fetching: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Status {
    Normal,
    ChangingTo(View),
}

/// One replica. All mutable state lives here; the trusted component is held
/// as an opaque handle.
#[derive(Clone, Debug, Hash)]
pub struct Replica {
    id: ReplicaId,
    cfg: Ignored<Arc<ProtocolConfig>>,
    registry: Ignored<Arc<KeyRegistry>>,
    clients: Ignored<Arc<ClientDirectory>>,
    tc: TrustedComponent,
    timeline: Option<CounterId>,
    view: View,
    status: Status,
    inbound: BTreeMap<ReplicaId, Inbound>,
    flagged: BTreeSet<ReplicaId>,
    /// (view, seq) -> (digest, leader timeline value) of admitted prepares.
    leader_prepares: BTreeMap<(View, Seq), (Digest, u64)>,
    /// Prevention mode: prepares waiting for their predecessor.
    prepare_queue: BTreeMap<Seq, Prepare>,
    next_prepare: Seq,
    /// Pipelining off: prepares waiting for the previous seq to commit.
    deferred: BTreeMap<Seq, Prepare>,
    slots: BTreeMap<Seq, Slot>,
    batches: BTreeMap<Digest, Batch>,
    /// Highest seq each peer has sent a Commit for.
    peer_commit_high: BTreeMap<ReplicaId, Seq>,
    committed_upto: Seq,
    // leader side
    pending: BTreeMap<(ClientId, u64), Request>,
    queue: VecDeque<(ClientId, u64)>,
    proposed: BTreeSet<(ClientId, u64)>,
    next_seq: Seq,
    batch_generation: u64,
    batch_timer: bool,
    // execution
    exec_cursor: Seq,
    service: KvService,
    last_reply: BTreeMap<ClientId, Reply>,
    /// Highest client_seq received directly from each client.
    heard: BTreeMap<ClientId, u64>,
    // checkpoints
    checkpoint_votes: BTreeMap<Seq, BTreeMap<ReplicaId, Checkpoint>>,
    own_checkpoints: BTreeMap<Seq, Checkpoint>,
    snapshots: BTreeMap<Seq, StateSnapshot>,
    stable: Option<CheckpointCert>,
    state_target: Option<Seq>,
    // view change
    own_log: Vec<LogEntry>,
    own_prepares: BTreeMap<(View, Seq), Prepare>,
    new_views: BTreeMap<View, NewView>,
    vcs: BTreeMap<View, BTreeMap<ReplicaId, ViewChange>>,
    suspicion_generation: u64,
    suspicion_armed: bool,
    verified_requests: Ignored<HashSet<Digest>>,
    tally: Ignored<ReplicaTally>,
    out: Ignored<Vec<Action>>,
    now: Ignored<Time>,
}

impl Replica {
    pub fn new(
        id: ReplicaId,
        cfg: Arc<ProtocolConfig>,
        mut tc: TrustedComponent,
        registry: Arc<KeyRegistry>,
        clients: Arc<ClientDirectory>,
    ) -> Replica {
        let timeline = match cfg.mode {
            Mode::Detection => tc.timeline_counter().ok(),
            Mode::Prevention => None,
        };
        let mut inbound = BTreeMap::new();
        for r in 0..cfg.n as u32 {
            let peer = ReplicaId(r);
            if peer != id {
                let counter = match tc.policy() {
                    crate::tc::CounterPolicy::Strict => {
                        Some(CounterId::derive(peer, crate::tc::TIMELINE))
                    }
                    crate::tc::CounterPolicy::Vulnerable => registry.announced_counter(peer),
                };
                inbound.insert(
                    peer,
                    Inbound {
                        counter,
                        ..Default::default()
                    },
                );
            }
        }
        Replica {
            id,
            cfg: Ignored(cfg),
            registry: Ignored(registry),
            clients: Ignored(clients),
            tc,
            timeline,
            view: 0,
            status: Status::Normal,
            inbound,
            flagged: BTreeSet::new(),
            leader_prepares: BTreeMap::new(),
            prepare_queue: BTreeMap::new(),
            next_prepare: 1,
            deferred: BTreeMap::new(),
            slots: BTreeMap::new(),
            batches: BTreeMap::new(),
            peer_commit_high: BTreeMap::new(),
            committed_upto: 0,
            pending: BTreeMap::new(),
            queue: VecDeque::new(),
            proposed: BTreeSet::new(),
            next_seq: 1,
            batch_generation: 0,
            batch_timer: false,
            exec_cursor: 0,
            service: KvService::default(),
            last_reply: BTreeMap::new(),
            heard: BTreeMap::new(),
            checkpoint_votes: BTreeMap::new(),
            own_checkpoints: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            stable: None,
            state_target: None,
            own_log: Vec::new(),
            own_prepares: BTreeMap::new(),
            new_views: BTreeMap::new(),
            vcs: BTreeMap::new(),
            suspicion_generation: 0,
            suspicion_armed: false,
            verified_requests: Ignored(HashSet::new()),
            tally: Ignored(ReplicaTally::default()),
            out: Ignored(Vec::new()),
            now: Ignored(0),
        }
    }

    // ------------------------------------------------------------------
    // accessors

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn is_leader(&self) -> bool {
        self.cfg.leader(self.view) == self.id
    }

    pub fn in_view_change(&self) -> bool {
        matches!(self.status, Status::ChangingTo(_))
    }

    pub fn exec_cursor(&self) -> Seq {
        self.exec_cursor
    }

    pub fn state_digest(&self) -> Digest {
        self.service.digest()
    }

    pub fn service(&self) -> &KvService {
        &self.service
    }

    pub fn stable_seq(&self) -> Seq {
        self.stable.as_ref().map_or(0, |c| c.seq)
    }

    pub fn committed(&self, seq: Seq) -> Option<(View, Digest)> {
        self.slots.get(&seq).and_then(|s| s.committed)
    }

    pub fn committed_seqs(&self) -> Vec<(Seq, Digest)> {
        self.slots
            .iter()
            .filter_map(|(s, slot)| slot.committed.map(|(_, d)| (*s, d)))
            .collect()
    }

    /// Last admitted timeline value of `peer` (detection mode).
    pub fn admission_cursor(&self, peer: ReplicaId) -> Option<u64> {
        self.inbound.get(&peer).map(|i| i.cursor)
    }

    /// Highest client_seq executed for `client`.
    pub fn last_executed(&self, client: ClientId) -> Option<u64> {
        self.last_reply.get(&client).map(|r| r.client_seq)
    }

    /// Digest of the leader prepare admitted for (view, seq).
    pub fn prepared_digest(&self, view: View, seq: Seq) -> Option<Digest> {
        self.slots.get(&seq).and_then(|s| s.prepared.get(&view).copied())
    }

    pub fn is_flagged(&self, peer: ReplicaId) -> bool {
        self.flagged.contains(&peer)
    }

    pub fn pending_requests(&self) -> usize {
        self.pending.len()
    }

    pub fn tally(&self) -> ReplicaTally {
        *self.tally
    }

    pub fn tc(&self) -> &TrustedComponent {
        &self.tc
    }

    /// The replica's own trusted component, e.g. for scripted faulty behaviour
    /// or administrative crash/restore. Only its public interface is reachable.
    pub fn tc_mut(&mut self) -> &mut TrustedComponent {
        &mut self.tc
    }

    pub fn timeline_counter(&self) -> Option<CounterId> {
        self.timeline
    }

    // ------------------------------------------------------------------
    // entry points

    pub fn on_message(&mut self, now: Time, from: Endpoint, msg: Message) -> Vec<Action> {
        *self.now = now;
        match from {
            Endpoint::Client(c) => {
                if let Message::Request(r) = msg {
                    if r.client == c {
                        self.on_request(r);
                    }
                }
            }
            Endpoint::Replica(r) if r != self.id => self.on_peer_message(r, msg),
            Endpoint::Replica(_) => {}
        }
        std::mem::take(&mut *self.out)
    }

    pub fn on_timer(&mut self, now: Time, timer: Timer) -> Vec<Action> {
        *self.now = now;
        match timer {
            Timer::Batch { generation } => {
                if generation == self.batch_generation && self.batch_timer {
                    self.batch_timer = false;
                    self.try_propose(true);
                }
            }
            Timer::Suspicion { generation } => {
                if generation == self.suspicion_generation && self.suspicion_armed {
                    self.suspicion_armed = false;
                    if !self.pending.is_empty()
                        && !self.is_leader()
                        && self.status == Status::Normal
                    {
                        self.start_view_change(self.view + 1);
                    }
                }
            }
            Timer::ViewChange { view } => {
                if self.status == Status::ChangingTo(view) {
                    self.start_view_change(view + 1);
                }
            }
            Timer::Decision { seq } => self.fire_decision(seq),
            Timer::Fetch { seq } => self.fetch(seq),
            Timer::StateTransfer { seq, attempt } => {
                if self.state_target == Some(seq) && self.exec_cursor < seq {
                    self.request_state(seq, attempt + 1);
                }
            }
        }
        std::mem::take(&mut *self.out)
    }

    /// Called after the replica's component became usable again: sends what
    /// could not be certified while it was down.
    /// Whether firing `timer` now could still have an effect. Superseded
    /// timers are no-ops; a scheduler may discard them.
    pub fn timer_is_live(&self, timer: &Timer) -> bool {
        match *timer {
            Timer::Batch { generation } => generation == self.batch_generation && self.batch_timer,
            Timer::Suspicion { generation } => {
                generation == self.suspicion_generation
                    && self.suspicion_armed
                    && !self.pending.is_empty()
                    && !self.is_leader()
                    && self.status == Status::Normal
            }
            Timer::ViewChange { view } => self.status == Status::ChangingTo(view),
            Timer::Decision { seq } => self
                .slots
                .get(&seq)
                .is_some_and(|s| s.committed.is_some() && !s.decision_done),
            Timer::Fetch { seq } => self.slots.get(&seq).is_some_and(|s| {
                s.committed
                    .is_some_and(|(_, d)| !self.batches.contains_key(&d) && seq > self.exec_cursor)
            }),
            Timer::StateTransfer { seq, .. } => self.state_target == Some(seq) && self.exec_cursor < seq,
        }
    }

    /// The view a live suspicion or view-change timer would move to.
    pub fn timer_target_view(&self, timer: &Timer) -> Option<View> {
        match *timer {
            Timer::Suspicion { .. } => Some(self.view + 1),
            Timer::ViewChange { view } => Some(view + 1),
            _ => None,
        }
    }

    pub fn on_tc_recovered(&mut self, now: Time) -> Vec<Action> {
        *self.now = now;
        let owed: Vec<(Seq, View)> = self
            .slots
            .iter()
            .flat_map(|(s, slot)| slot.owed_commit.iter().map(move |v| (*s, *v)))
            .collect();
        for (seq, view) in owed {
            if view != self.view {
                continue;
            }
            let digest = self
                .slots
                .get(&seq)
                .and_then(|s| s.prepared.get(&view).copied());
            if let Some(d) = digest {
                if self.send_commit(view, seq, d) {
                    if let Some(slot) = self.slots.get_mut(&seq) {
                        slot.owed_commit.remove(&view);
                    }
                    self.try_commit(seq);
                } else {
                    break;
                }
            }
        }
        self.try_propose(false);
        self.arm_suspicion();
        std::mem::take(&mut *self.out)
    }

    // ------------------------------------------------------------------
    // plumbing

    fn send(&mut self, to: Endpoint, msg: Message) {
        self.out.push(Action::Send { to, msg });
    }

    fn broadcast(&mut self, msg: Message) {
        for r in 0..self.cfg.n as u32 {
            if r != self.id.0 {
                self.send(Endpoint::Replica(ReplicaId(r)), msg.clone());
            }
        }
    }

    fn timer(&mut self, after: Time, timer: Timer) {
        let at = *self.now + after;
        self.out.push(Action::SetTimer { at, timer });
    }

    fn note(&mut self, note: Note) {
        self.out.push(Action::Note(note));
    }

    fn checker(&mut self) -> Checker<'_> {
        Checker {
            cfg: &self.cfg.0,
            registry: &self.registry.0,
            tc: &mut self.tc,
            tally: &mut self.tally.0,
            known_new_views: HashSet::new(),
        }
    }

    fn verify_ui(&mut self, ui: &UniqueIdentifier, hash: &Digest, sender: ReplicaId) -> bool {
        self.checker().ui(ui, hash, sender)
    }

    /// Certifies `hash`, on the timeline (detection) or for `ctx` (prevention).
    fn certify(&mut self, ctx: ContextId, hash: Digest) -> Option<UniqueIdentifier> {
        let res = match self.cfg.mode {
            Mode::Detection => {
                let mut res = match self.timeline {
                    Some(q) => self.tc.usig_create_ui(&q, hash),
                    None => Err(TcError::UnknownCounter),
                };
                if res == Err(TcError::UnknownCounter) {
                    // a restarted component starts with no counters
                    if let Ok(q) = self.tc.timeline_counter() {
                        self.timeline = Some(q);
                        res = self.tc.usig_create_ui(&q, hash);
                    }
                }
                res
            }
            Mode::Prevention => {
                let mark = self
                    .tc
                    .trinx_marks()
                    .into_iter()
                    .find(|m| m.phase == ctx.phase);
                if let Some(m) = mark {
                    if m.view == ctx.view && m.seq + 1 < ctx.seq {
                        // contexts in between are never going to be used by us
                        let _ = self.tc.trinx_skip(ctx.phase, ctx.view, ctx.seq - 1);
                    }
                }
                self.tc.trinx_certify(ctx, hash)
            }
        };
        match res {
            Ok(ui) => {
                self.tally.ui_created += 1;
                Some(ui)
            }
            Err(e) => {
                self.note(Note::TcFailure { op: e.to_string() });
                None
            }
        }
    }

    fn record_own(&mut self, msg: &Message) {
        if self.cfg.mode == Mode::Detection {
            if let Some(e) = msg.log_entry() {
                self.own_log.push(e);
            }
        } else if let Some(e @ (LogEntry::Prepare { .. } | LogEntry::Commit { .. })) =
            msg.log_entry()
        {
            self.own_log.push(e);
        }
    }

    fn slot(&mut self, seq: Seq) -> &mut Slot {
        self.slots.entry(seq).or_default()
    }

    // ------------------------------------------------------------------
    // clients

    fn on_request(&mut self, req: Request) {
        let first_copy = self.heard.get(&req.client).is_none_or(|&s| s < req.client_seq);
        if first_copy {
            self.heard.insert(req.client, req.client_seq);
        }
        if let Some(last) = self.last_reply.get(&req.client) {
            if last.client_seq == req.client_seq {
                if first_copy {
                    // executed before the client's own copy arrived; the
                    // reply already went out
                    return;
                }
                let mut reply = last.clone();
                reply.replica = self.id;
                self.send(Endpoint::Client(req.client), Message::Reply(reply));
                return;
            }
            if last.client_seq > req.client_seq {
                return;
            }
        }
        let key = (req.client, req.client_seq);
        if self.pending.contains_key(&key) {
            return;
        }
        if !self.check_request(&req) {
            return;
        }
        self.pending.insert(key, req);
        if self.is_leader() {
            if self.status == Status::Normal && !self.proposed.contains(&key) {
                self.queue.push_back(key);
                self.try_propose(false);
            }
        } else {
            self.arm_suspicion();
        }
    }

    fn check_request(&mut self, req: &Request) -> bool {
        let d = req.digest();
        if self.verified_requests.contains(&d) {
            return true;
        }
        self.tally.client_sigs_verified += 1;
        let Ok(sig) = <[u8; 64]>::try_from(req.auth.as_slice()) else {
            return false;
        };
        let signed = Request::signing_digest(req.client, req.client_seq, &req.payload);
        if self.clients.verify(req.client, &signed, &sig) {
            self.verified_requests.insert(d);
            true
        } else {
            false
        }
    }

    fn arm_suspicion(&mut self) {
        if self.suspicion_armed
            || self.pending.is_empty()
            || self.is_leader()
            || self.status != Status::Normal
        {
            return;
        }
        self.suspicion_armed = true;
        self.suspicion_generation += 1;
        let g = self.suspicion_generation;
        self.timer(
            self.cfg.view_change_timeout,
            Timer::Suspicion { generation: g },
        );
    }

    fn reset_suspicion(&mut self) {
        self.suspicion_armed = false;
        self.suspicion_generation += 1;
        self.arm_suspicion();
    }

    // ------------------------------------------------------------------
    // leader

    fn may_propose(&self) -> bool {
        if !self.is_leader() || self.status != Status::Normal || !self.tc.is_available() {
            return false;
        }
        if self.next_seq > self.stable_seq() + self.cfg.window {
            return false;
        }
        let in_flight = self.next_seq - 1 - self.committed_upto.min(self.next_seq - 1);
        let depth = if self.cfg.pipelining {
            self.cfg.pipeline_depth
        } else {
            1
        };
        in_flight < depth
    }

    fn try_propose(&mut self, timeout: bool) {
        let mut timed_out = timeout;
        loop {
            self.queue.retain(|k| self.pending.contains_key(k));
            if self.queue.is_empty() || !self.may_propose() {
                break;
            }
            let full = self.queue.len() >= self.cfg.batch_size;
            if !full && !timed_out {
                if !self.batch_timer {
                    self.batch_timer = true;
                    self.batch_generation += 1;
                    let g = self.batch_generation;
                    self.timer(self.cfg.batch_timeout, Timer::Batch { generation: g });
                }
                break;
            }
            timed_out = false;
            let take = self.queue.len().min(self.cfg.batch_size);
            let keys: Vec<_> = self.queue.drain(..take).collect();
            let requests: Vec<Request> = keys
                .iter()
                .filter_map(|k| self.pending.get(k).cloned())
                .collect();
            if !self.propose(Batch::new(requests)) {
                for k in keys.into_iter().rev() {
                    self.queue.push_front(k);
                }
                break;
            }
            for k in keys {
                self.proposed.insert(k);
            }
            if self.batch_timer {
                self.batch_timer = false;
                self.batch_generation += 1;
            }
        }
    }

    /// Certifies and broadcasts a Prepare for the next seq, followed by the
    /// leader's own Commit.
    fn propose(&mut self, batch: Batch) -> bool {
        let (view, seq) = (self.view, self.next_seq);
        let hash = prepare_hash(view, seq, &batch.digest);
        let Some(ui) = self.certify(
            ContextId {
                phase: Phase::Prepare,
                view,
                seq,
            },
            hash,
        ) else {
            return false;
        };
        self.next_seq += 1;
        let p = Prepare {
            view,
            seq,
            batch,
            ui,
        };
        let msg = Message::Prepare(p.clone());
        self.record_own(&msg);
        self.broadcast(msg);
        self.accept_prepare(p);
        true
    }

    // ------------------------------------------------------------------
    // replica-to-replica

    fn on_peer_message(&mut self, from: ReplicaId, msg: Message) {
        if self.flagged.contains(&from) {
            return;
        }
        match msg {
            Message::Decision(d) => self.on_decision(from, d),
            Message::FetchBatch { digest } => {
                if let Some(b) = self.batches.get(&digest).cloned() {
                    self.send(Endpoint::Replica(from), Message::BatchReply { batch: b });
                }
            }
            Message::BatchReply { batch } => self.on_batch(batch),
            Message::StateRequest { seq } => {
                if let Some(s) = self.snapshots.get(&seq).cloned() {
                    self.send(
                        Endpoint::Replica(from),
                        Message::StateReply {
                            snapshot: Box::new(s),
                        },
                    );
                }
            }
            Message::StateReply { snapshot } => self.on_state(*snapshot),
            Message::Request(_) | Message::Reply(_) => {}
            certified => self.admit(from, certified),
        }
    }

    /// Authenticates a certified message and releases it in timeline order.
    fn admit(&mut self, from: ReplicaId, msg: Message) {
        let (Some(ui), Some(hash)) = (msg.ui().cloned(), msg.certified_hash()) else {
            return;
        };
        if !self.sender_matches(from, &msg) || !self.verify_ui(&ui, &hash, from) {
            return;
        }
        if self.cfg.mode == Mode::Prevention {
            if ui.context.is_some_and(|c| self.context_matches(&c, &msg)) {
                self.dispatch(from, msg);
            }
            return;
        }
        let acceptance = self.cfg.counter_acceptance;
        let inbound = self.inbound.entry(from).or_default();
        if inbound.counter != Some(ui.counter) {
            if acceptance == CounterAcceptance::LeaderAnnounced && ui.value == 1 {
                // the peer announces a fresh counter by starting to use it
                inbound.counter = Some(ui.counter);
                inbound.cursor = 0;
                inbound.buffer.clear();
                inbound.gap_reported = false;
            } else {
                return;
            }
        }
        if ui.value <= inbound.cursor {
            return;
        }
        if ui.value > inbound.cursor + 1 {
            if ui.value <= inbound.cursor + MAX_BUFFERED_AHEAD {
                inbound.buffer.insert(ui.value, msg);
            }
            if !inbound.gap_reported {
                inbound.gap_reported = true;
                let (cursor, buffered) = (inbound.cursor, ui.value);
                self.note(Note::Gap {
                    sender: from,
                    cursor,
                    buffered,
                });
            }
            return;
        }
        inbound.cursor = ui.value;
        let mut ready = vec![msg];
        while let Some(next) = inbound.buffer.remove(&(inbound.cursor + 1)) {
            inbound.cursor += 1;
            ready.push(next);
        }
        if inbound.buffer.is_empty() {
            inbound.gap_reported = false;
        }
        for m in ready {
            if self.flagged.contains(&from) {
                break;
            }
            self.dispatch(from, m);
        }
    }

    fn sender_matches(&self, from: ReplicaId, msg: &Message) -> bool {
        match msg {
            Message::Prepare(p) => self.cfg.leader(p.view) == from,
            Message::Commit(c) => c.replica == from,
            Message::Checkpoint(c) => c.replica == from,
            Message::ViewChange(v) => v.sender == from,
            Message::NewView(nv) => nv.sender == from && self.cfg.leader(nv.view) == from,
            _ => false,
        }
    }

    fn context_matches(&self, ctx: &ContextId, msg: &Message) -> bool {
        let expect = match msg {
            Message::Prepare(p) => (Phase::Prepare, p.view, p.seq),
            Message::Commit(c) => (Phase::Commit, c.view, c.seq),
            Message::Checkpoint(c) => (Phase::Checkpoint, 0, c.seq),
            Message::ViewChange(v) => (Phase::ViewChange, v.new_view, 1),
            Message::NewView(nv) => (Phase::NewView, nv.view, 1),
            _ => return false,
        };
        (ctx.phase, ctx.view, ctx.seq) == expect
    }

    fn dispatch(&mut self, from: ReplicaId, msg: Message) {
        match msg {
            Message::Prepare(p) => self.on_prepare(from, p),
            Message::Commit(c) => self.on_commit(c),
            Message::Checkpoint(c) => self.on_checkpoint(c),
            Message::ViewChange(vc) => self.on_view_change(*vc),
            Message::NewView(nv) => self.on_new_view(*nv),
            _ => {}
        }
    }

    fn flag(&mut self, leader: ReplicaId, value: u64) {
        if self.flagged.insert(leader) {
            self.note(Note::LeaderFlagged { leader, value });
            if let Some(i) = self.inbound.get_mut(&leader) {
                i.buffer.clear();
            }
            if self.cfg.leader(self.view) == leader && self.status == Status::Normal {
                self.start_view_change(self.view + 1);
            }
        }
    }

    // ------------------------------------------------------------------
    // normal case

    fn on_prepare(&mut self, from: ReplicaId, p: Prepare) {
        if let Some((d, _)) = self.leader_prepares.get(&(p.view, p.seq)) {
            if *d != p.batch.digest {
                self.flag(from, p.ui.value);
            }
            return;
        }
        if p.view != self.view || self.status != Status::Normal || p.seq <= self.stable_seq() {
            return;
        }
        if p.seq > self.stable_seq() + self.cfg.window + self.cfg.checkpoint_interval {
            return;
        }
        for r in p.batch.requests.iter() {
            if !self.check_request(r) {
                return;
            }
        }
        if self.cfg.mode == Mode::Prevention {
            // prepares are taken in seq order; later ones wait
            self.next_prepare = self.next_prepare.max(self.stable_seq() + 1);
            if p.seq > self.next_prepare {
                self.prepare_queue.insert(p.seq, p);
                return;
            }
            self.take_prepare(p);
            while let Some(next) = self.prepare_queue.remove(&self.next_prepare) {
                if next.view != self.view {
                    continue;
                }
                self.take_prepare(next);
            }
        } else {
            self.take_prepare(p);
        }
    }

    fn take_prepare(&mut self, p: Prepare) {
        self.next_prepare = self.next_prepare.max(p.seq + 1);
        self.leader_prepares
            .insert((p.view, p.seq), (p.batch.digest, p.ui.value));
        if !self.cfg.pipelining
            && p.seq > 1
            && p.seq - 1 > self.committed_upto.max(self.stable_seq())
        {
            self.deferred.insert(p.seq, p);
            return;
        }
        self.accept_prepare(p);
    }

    /// Records an admitted prepare and, on followers, answers with a Commit.
    fn accept_prepare(&mut self, p: Prepare) {
        let (view, seq, digest) = (p.view, p.seq, p.batch.digest);
        self.batches.insert(digest, p.batch.clone());
        self.own_prepares.insert((view, seq), p.clone());
        let leader = self.cfg.leader(view);
        let att = Attestation {
            replica: leader,
            kind: AttestationKind::Prepare,
            ui: p.ui.clone(),
        };
        {
            let slot = self.slot(seq);
            slot.prepared.insert(view, digest);
            slot.votes
                .entry((view, digest))
                .or_default()
                .insert(leader, att);
        }
        self.note(Note::Prepared { view, seq, digest });
        if !self.send_commit(view, seq, digest) {
            self.slot(seq).owed_commit.insert(view);
        }
        self.try_commit(seq);
        if self
            .slots
            .get(&seq)
            .is_some_and(|s| s.committed.is_some())
        {
            self.try_execute();
        }
    }

    fn send_commit(&mut self, view: View, seq: Seq, digest: Digest) -> bool {
        let hash = commit_hash(view, seq, self.id, &digest);
        let Some(ui) = self.certify(
            ContextId {
                phase: Phase::Commit,
                view,
                seq,
            },
            hash,
        ) else {
            return false;
        };
        let c = Commit {
            view,
            seq,
            replica: self.id,
            digest,
            ui: ui.clone(),
        };
        let msg = Message::Commit(c);
        self.record_own(&msg);
        self.broadcast(msg);
        if self.cfg.leader(view) != self.id {
            let me = self.id;
            let att = Attestation {
                replica: me,
                kind: AttestationKind::Commit,
                ui,
            };
            self.slot(seq)
                .votes
                .entry((view, digest))
                .or_default()
                .insert(me, att);
        }
        true
    }

    fn on_commit(&mut self, c: Commit) {
        let (view, seq, from) = (c.view, c.seq, c.replica);
        let high = self.peer_commit_high.entry(from).or_insert(0);
        *high = (*high).max(seq);
        // a peer's Commit, together with the leader's Prepare it answers, is
        // a quorum when f = 1: the peer has committed
        if self.cfg.quorum() <= 2 && from != self.cfg.leader(view) {
            self.slot(seq).decided.insert(from);
        }
        if view != self.view || self.status != Status::Normal || seq <= self.stable_seq() {
            return;
        }
        if from == self.cfg.leader(view) {
            // the leader's Prepare already counts as its vote
            return;
        }
        let att = Attestation {
            replica: from,
            kind: AttestationKind::Commit,
            ui: c.ui,
        };
        self.slot(seq)
            .votes
            .entry((view, c.digest))
            .or_default()
            .insert(from, att);
        self.try_commit(seq);
    }

    fn try_commit(&mut self, seq: Seq) {
        let q = self.cfg.quorum();
        let Some(slot) = self.slots.get(&seq) else {
            return;
        };
        if slot.committed.is_some() {
            return;
        }
        let found = slot
            .votes
            .iter()
            .find(|(_, v)| v.len() >= q)
            .map(|(k, v)| (*k, v.values().cloned().collect()));
        if let Some(((view, digest), proof)) = found {
            self.commit(seq, view, digest, proof, CommitPath::Quorum);
        }
    }

    fn commit(
        &mut self,
        seq: Seq,
        view: View,
        digest: Digest,
        proof: Vec<Attestation>,
        path: CommitPath,
    ) {
        let slot = self.slot(seq);
        slot.committed = Some((view, digest));
        slot.proof = proof;
        self.note(Note::Committed {
            view,
            seq,
            digest,
            path,
        });
        while self
            .slots
            .get(&(self.committed_upto + 1))
            .is_some_and(|s| s.committed.is_some())
        {
            self.committed_upto += 1;
        }
        if self.cfg.decisions && self.cfg.leader(self.view) != self.id {
            if self.cfg.decision_delay == 0 {
                self.fire_decision(seq);
            } else {
                self.timer(self.cfg.decision_delay, Timer::Decision { seq });
            }
        }
        if let Some(p) = self.deferred.remove(&seq) {
            if p.view == self.view && self.status == Status::Normal {
                self.accept_prepare(p);
            }
        }
        if !self.batches.contains_key(&digest) {
            self.slot(seq).fetching = true;
            self.timer(self.cfg.fetch_delay, Timer::Fetch { seq });
        }
        self.try_execute();
        if !self.cfg.pipelining {
            if let Some(p) = self.deferred.remove(&(seq + 1)) {
                if p.view == self.view && self.status == Status::Normal {
                    self.accept_prepare(p);
                }
            }
        }
        self.try_propose(false);
    }

    fn peer_decided(&self, peer: ReplicaId, seq: Seq, slot: &Slot) -> bool {
        slot.decided.contains(&peer)
            || (!self.cfg.pipelining && self.peer_commit_high.get(&peer).is_some_and(|&h| h > seq))
    }

    fn fire_decision(&mut self, seq: Seq) {
        let leader = self.cfg.leader(self.view);
        let Some(slot) = self.slots.get(&seq) else {
            return;
        };
        let Some((view, digest)) = slot.committed else {
            return;
        };
        if slot.decision_done || leader == self.id {
            return;
        }
        let suppress = self.cfg.decision_delay > 0;
        let targets: Vec<ReplicaId> = (0..self.cfg.n as u32)
            .map(ReplicaId)
            .filter(|&r| r != self.id && r != leader)
            .filter(|&r| !(suppress && self.peer_decided(r, seq, slot)))
            .collect();
        let skipped = (self.cfg.n - 2) - targets.len();
        let d = Decision {
            view,
            seq,
            digest,
            sender: self.id,
            proof: slot.proof.clone(),
            threshold: self.cfg.threshold_proofs,
        };
        self.slot(seq).decision_done = true;
        self.tally.decisions_suppressed += skipped as u64;
        for r in targets {
            self.tally.decisions_sent += 1;
            self.send(Endpoint::Replica(r), Message::Decision(d.clone()));
        }
    }

    fn on_decision(&mut self, from: ReplicaId, d: Decision) {
        if d.sender != from {
            return;
        }
        self.slot(d.seq).decided.insert(from);
        if d.seq <= self.stable_seq()
            || self
                .slots
                .get(&d.seq)
                .is_some_and(|s| s.committed.is_some())
        {
            // nothing to learn; not even verified
            self.tally.decisions_ignored += 1;
            return;
        }
        if !self.valid_proof(&d) {
            return;
        }
        self.commit(d.seq, d.view, d.digest, d.proof, CommitPath::Decision);
    }

    fn valid_proof(&mut self, d: &Decision) -> bool {
        let mut seen = BTreeSet::new();
        for a in &d.proof {
            let hash = match a.kind {
                AttestationKind::Prepare if a.replica == self.cfg.leader(d.view) => {
                    prepare_hash(d.view, d.seq, &d.digest)
                }
                AttestationKind::Commit => commit_hash(d.view, d.seq, a.replica, &d.digest),
                _ => return false,
            };
            if !seen.insert(a.replica) || !self.verify_ui(&a.ui, &hash, a.replica) {
                return false;
            }
        }
        seen.len() >= self.cfg.quorum()
    }

    fn fetch(&mut self, seq: Seq) {
        let Some(slot) = self.slots.get(&seq) else {
            return;
        };
        let Some((_, digest)) = slot.committed else {
            return;
        };
        if self.batches.contains_key(&digest) || seq <= self.exec_cursor {
            return;
        }
        let peers: Vec<ReplicaId> = slot
            .proof
            .iter()
            .map(|a| a.replica)
            .filter(|r| *r != self.id)
            .collect();
        for p in peers {
            self.send(Endpoint::Replica(p), Message::FetchBatch { digest });
        }
        self.timer(self.cfg.fetch_delay * 4, Timer::Fetch { seq });
    }

    fn on_batch(&mut self, batch: Batch) {
        if self.batches.contains_key(&batch.digest) || !batch.well_formed() {
            return;
        }
        let wanted = self
            .slots
            .values()
            .any(|s| s.committed.is_some_and(|(_, d)| d == batch.digest));
        if !wanted {
            return;
        }
        for r in batch.requests.iter() {
            if !self.check_request(r) {
                return;
            }
        }
        self.batches.insert(batch.digest, batch);
        self.try_execute();
    }

    // ------------------------------------------------------------------
    // execution

    fn try_execute(&mut self) {
        loop {
            let next = self.exec_cursor + 1;
            let Some(digest) = self
                .slots
                .get(&next)
                .and_then(|s| s.committed)
                .map(|(_, d)| d)
            else {
                break;
            };
            let Some(batch) = self.batches.get(&digest).cloned() else {
                break;
            };
            self.execute(next, &batch);
        }
    }

    fn execute(&mut self, seq: Seq, batch: &Batch) {
        let mut replies = Vec::new();
        for req in batch.requests.iter() {
            let key = (req.client, req.client_seq);
            self.pending.remove(&key);
            self.proposed.remove(&key);
            if self
                .last_reply
                .get(&req.client)
                .is_some_and(|r| r.client_seq >= req.client_seq)
            {
                continue;
            }
            let result = self.service.apply(&req.payload);
            let reply = Reply {
                client: req.client,
                client_seq: req.client_seq,
                seq,
                replica: self.id,
                result,
            };
            self.last_reply.insert(req.client, reply.clone());
            replies.push(reply);
        }
        self.exec_cursor = seq;
        self.note(Note::Executed {
            seq,
            requests: batch.len(),
            state: self.service.digest(),
        });
        for r in replies {
            self.send(Endpoint::Client(r.client), Message::Reply(r));
        }
        if let Some(slot) = self.slots.get_mut(&seq) {
            slot.fetching = false;
        }
        if seq.is_multiple_of(self.cfg.checkpoint_interval) {
            self.make_checkpoint(seq);
        }
        self.reset_suspicion();
    }

    // ------------------------------------------------------------------
    // checkpoints and state transfer

    fn snapshot(&self, seq: Seq) -> StateSnapshot {
        StateSnapshot {
            seq,
            service: self.service.clone(),
            last_executed: self
                .last_reply
                .iter()
                .map(|(c, r)| (*c, r.client_seq, r.clone()))
                .collect(),
        }
    }

    fn make_checkpoint(&mut self, seq: Seq) {
        let snap = self.snapshot(seq);
        let state = snapshot_digest(&snap);
        self.snapshots.insert(seq, snap);
        let hash = checkpoint_hash(seq, self.id, &state);
        let Some(ui) = self.certify(
            ContextId {
                phase: Phase::Checkpoint,
                view: 0,
                seq,
            },
            hash,
        ) else {
            return;
        };
        let cp = Checkpoint {
            seq,
            replica: self.id,
            state,
            ui,
        };
        let msg = Message::Checkpoint(cp.clone());
        self.record_own(&msg);
        self.broadcast(msg);
        self.own_checkpoints.insert(seq, cp.clone());
        self.on_checkpoint(cp);
    }

    fn on_checkpoint(&mut self, cp: Checkpoint) {
        if cp.seq <= self.stable_seq() {
            return;
        }
        let (seq, state) = (cp.seq, cp.state);
        self.checkpoint_votes
            .entry(seq)
            .or_default()
            .insert(cp.replica, cp);
        let votes: Vec<Checkpoint> = self.checkpoint_votes[&seq]
            .values()
            .filter(|c| c.state == state)
            .cloned()
            .collect();
        if votes.len() >= self.cfg.quorum() {
            self.stabilize(CheckpointCert { seq, state, votes });
        }
    }

    fn stabilize(&mut self, cert: CheckpointCert) {
        let seq = cert.seq;
        if seq <= self.stable_seq() {
            return;
        }
        self.stable = Some(cert);
        self.note(Note::StableCheckpoint { seq });
        if self.exec_cursor < seq {
            self.request_state(seq, 0);
        }
        self.prune();
        self.try_propose(false);
    }

    /// Discards everything at or below the stable checkpoint that a view
    /// change or a lagging peer can no longer need.
    fn prune(&mut self) {
        let s = self.stable_seq();
        let keep_from = s.min(self.exec_cursor);
        self.slots = self.slots.split_off(&(keep_from + 1));
        let live: BTreeSet<Digest> = self
            .slots
            .values()
            .flat_map(|sl| sl.votes.keys().map(|(_, d)| *d).chain(sl.committed.map(|(_, d)| d)))
            .collect();
        self.batches.retain(|d, _| live.contains(d));
        self.own_prepares.retain(|(_, q), _| *q > s);
        self.leader_prepares.retain(|(_, q), _| *q > s);
        self.checkpoint_votes = self.checkpoint_votes.split_off(&s);
        self.snapshots = self.snapshots.split_off(&s);
        self.deferred.retain(|q, _| *q > s);
        self.prepare_queue.retain(|q, _| *q > s);
        self.next_prepare = self.next_prepare.max(s + 1);
        if let Some((&at, base)) = self.own_checkpoints.range(..=s).next_back() {
            let base = base.ui.value;
            self.own_checkpoints = self.own_checkpoints.split_off(&at);
            let detection = self.cfg.mode == Mode::Detection;
            // everything certified after the base stays, as do older
            // statements about seqs that are not yet stable
            self.own_log.retain(|e| {
                e.slot().is_some_and(|(_, q, _)| q > s) || (detection && e.ui().value >= base)
            });
        }
    }

    fn request_state(&mut self, seq: Seq, attempt: u32) {
        self.state_target = Some(seq);
        let Some(cert) = &self.stable else { return };
        let voters: Vec<ReplicaId> = cert
            .votes
            .iter()
            .map(|v| v.replica)
            .filter(|r| *r != self.id)
            .collect();
        if voters.is_empty() {
            return;
        }
        let target = voters[attempt as usize % voters.len()];
        self.send(Endpoint::Replica(target), Message::StateRequest { seq });
        self.timer(
            self.cfg.fetch_delay * 4,
            Timer::StateTransfer { seq, attempt },
        );
    }

    fn on_state(&mut self, snap: StateSnapshot) {
        let Some(cert) = &self.stable else { return };
        if snap.seq != cert.seq
            || snap.seq <= self.exec_cursor
            || snapshot_digest(&snap) != cert.state
        {
            return;
        }
        let seq = snap.seq;
        self.service = snap.service.clone();
        self.last_reply = snap
            .last_executed
            .iter()
            .map(|(c, _, r)| (*c, r.clone()))
            .collect();
        self.pending
            .retain(|(c, cs), _| snap.last_executed.iter().all(|(k, s, _)| k != c || s < cs));
        self.exec_cursor = seq;
        self.committed_upto = self.committed_upto.max(seq);
        self.state_target = None;
        self.snapshots.insert(seq, snap);
        self.note(Note::StateTransferred { seq });
        // own statement about the adopted state, so later view changes have a base
        let state = self.stable.as_ref().map(|c| c.state).unwrap_or_default();
        let hash = checkpoint_hash(seq, self.id, &state);
        if let Some(ui) = self.certify(
            ContextId {
                phase: Phase::Checkpoint,
                view: 0,
                seq,
            },
            hash,
        ) {
            let cp = Checkpoint {
                seq,
                replica: self.id,
                state,
                ui,
            };
            let msg = Message::Checkpoint(cp.clone());
            self.record_own(&msg);
            self.broadcast(msg);
            self.own_checkpoints.insert(seq, cp);
        }
        self.prune();
        self.try_execute();
        self.reset_suspicion();
    }

    // ------------------------------------------------------------------
    // view change

    fn start_view_change(&mut self, target: View) {
        if let Status::ChangingTo(v) = self.status {
            if v >= target {
                return;
            }
        }
        if target <= self.view {
            return;
        }
        let s = self.stable_seq();
        let base = self.own_checkpoints.range(..=s).next_back().map(|(_, c)| c.clone());
        let log = self.own_log.clone();
        let prepares: Vec<Prepare> = self
            .own_prepares
            .values()
            .filter(|p| p.seq > s)
            .cloned()
            .collect();
        let views: BTreeSet<View> = prepares.iter().map(|p| p.view).filter(|v| *v > 0).collect();
        let new_views: Vec<NewView> = views
            .iter()
            .filter_map(|v| self.new_views.get(v).cloned())
            .collect();
        let stable = self.stable.clone();
        let hash = ViewChange::content_digest(
            target, self.id, &stable, &base, &log, &prepares, &new_views,
        );
        let Some(ui) = self.certify(
            ContextId {
                phase: Phase::ViewChange,
                view: target,
                seq: 1,
            },
            hash,
        ) else {
            // cannot leave the view without a certificate; try again later
            self.suspicion_armed = false;
            self.arm_suspicion();
            return;
        };
        let vc = ViewChange {
            new_view: target,
            sender: self.id,
            stable,
            base,
            log,
            prepares,
            new_views,
            ui,
        };
        self.status = Status::ChangingTo(target);
        self.suspicion_armed = false;
        self.suspicion_generation += 1;
        self.note(Note::ViewChangeStarted { view: target });
        let msg = Message::ViewChange(Box::new(vc.clone()));
        self.record_own(&msg);
        self.broadcast(msg);
        self.vcs.entry(target).or_default().insert(self.id, vc);
        let wait = self.cfg.view_change_timeout * (target - self.view).min(8);
        self.timer(wait, Timer::ViewChange { view: target });
        self.try_new_view(target);
    }

    fn on_view_change(&mut self, vc: ViewChange) {
        let target = vc.new_view;
        if target <= self.view
            || self
                .vcs
                .get(&target)
                .is_some_and(|m| m.contains_key(&vc.sender))
        {
            return;
        }
        if !self.checker().view_change(&vc) {
            return;
        }
        self.vcs.entry(target).or_default().insert(vc.sender, vc);
        // f+1 replicas moving on means at least one correct replica suspects the leader
        if self.vcs[&target].len() >= self.cfg.quorum()
            && self.status == Status::Normal
            && !self.is_leader()
        {
            self.start_view_change(target);
        }
        self.try_new_view(target);
    }

    fn try_new_view(&mut self, target: View) {
        if self.cfg.leader(target) != self.id || target <= self.view {
            return;
        }
        let Some(m) = self.vcs.get(&target) else {
            return;
        };
        if m.len() < self.cfg.quorum() || self.new_views.contains_key(&target) {
            return;
        }
        let vcs: Vec<ViewChange> = m.values().take(self.cfg.quorum()).cloned().collect();
        let hash = NewView::content_digest(target, self.id, &vcs);
        let Some(ui) = self.certify(
            ContextId {
                phase: Phase::NewView,
                view: target,
                seq: 1,
            },
            hash,
        ) else {
            return;
        };
        let nv = NewView {
            view: target,
            sender: self.id,
            vcs,
            ui,
        };
        let plan = super::viewchange::plan_new_view(target, &nv.vcs);
        let msg = Message::NewView(Box::new(nv.clone()));
        self.record_own(&msg);
        self.broadcast(msg);
        self.install(nv, plan);
    }

    fn on_new_view(&mut self, nv: NewView) {
        if nv.view <= self.view {
            if self
                .new_views
                .get(&nv.view)
                .is_some_and(|known| known.hash() != nv.hash())
            {
                self.flag(nv.sender, nv.ui.value);
            }
            return;
        }
        let Some(plan) = self.checker().new_view(&nv) else {
            // a certified but invalid new view convicts its leader
            self.flag(nv.sender, nv.ui.value);
            self.start_view_change(nv.view + 1);
            return;
        };
        self.install(nv, plan);
    }

    fn install(&mut self, nv: NewView, plan: NewViewPlan) {
        let view = nv.view;
        self.view = view;
        self.status = Status::Normal;
        self.new_views.insert(view, nv);
        self.vcs = self.vcs.split_off(&(view + 1));
        self.deferred.clear();
        self.prepare_queue.clear();
        self.proposed.clear();
        self.queue.clear();
        self.batch_timer = false;
        self.note(Note::ViewInstalled { view });
        if let Some(cert) = plan.stable.clone() {
            if cert.seq > self.stable_seq() {
                self.stabilize(cert);
            }
        }
        self.next_prepare = plan.stable_seq().max(self.stable_seq()) + 1;
        if self.is_leader() {
            self.next_seq = plan.stable_seq().max(self.stable_seq()) + 1;
            for (seq, batch) in plan.reproposals.iter() {
                if *seq <= self.stable_seq() {
                    continue;
                }
                self.next_seq = *seq;
                if !self.propose(batch.clone()) {
                    break;
                }
            }
            for (_, b) in plan.reproposals.iter() {
                for r in b.requests.iter() {
                    self.proposed.insert((r.client, r.client_seq));
                }
            }
            let keys: Vec<_> = self
                .pending
                .keys()
                .filter(|k| !self.proposed.contains(k))
                .copied()
                .collect();
            self.queue.extend(keys);
            self.try_propose(false);
        } else {
            self.reset_suspicion();
        }
    }
}

/// Digest binding the full service state, the reply table and the seq.
pub(crate) fn snapshot_digest(s: &StateSnapshot) -> Digest {
    let mut e = Encoder::new("snapshot");
    e.u64(s.seq)
        .digest(&s.service.digest())
        .u64(s.service.applied());
    let bytes = serde_json::to_vec(&s.service).unwrap_or_default();
    e.bytes(&bytes);
    e.u32(s.last_executed.len() as u32);
    for (c, cs, r) in &s.last_executed {
        e.u32(c.0).u64(*cs).digest(&r.result).u64(r.seq);
    }
    e.finish()
}
