use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{ms, ConfigError, SimConfig};
use super::oracle::{self, Verdicts};
use super::trace::{NetTally, Trace};
use crate::adversary::{AdvCtx, Adversary, AdversaryRegistry};
use crate::clients::{Client, ClientAction, LatencyRecord, ReplyOutcome};
use crate::crypto::{seeded_rng, ClientDirectory, Digest};
use crate::ids::{ClientId, Endpoint, ReplicaId, Seq, Time, View};
use crate::protocol::{Action, Message, Note, ProtocolConfig, Replica, ReplicaTally, Timer};
use crate::resource_model::SizeModel;
use crate::tc::{AdminToken, Deployment, IssuedRecord, KeyRegistry};

#[derive(Clone, Debug)]
enum Event {
    Deliver { from: Endpoint, to: Endpoint, msg: Message },
    ReplicaTimer { replica: ReplicaId, timer: Timer },
    Retransmit { client: ClientId, client_seq: u64 },
    ClientStart { client: ClientId },
    Wake { tag: u64 },
    Heal { partition: usize },
}

struct Queued {
    time: Time,
    id: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.id) == (o.time, o.id)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.time, self.id).cmp(&(o.time, o.id))
    }
}

/// A protocol note as observed by the simulator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub t: Time,
    pub replica: ReplicaId,
    pub note: Note,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub id: ReplicaId,
    pub byzantine: bool,
    pub tc_available: bool,
    pub view: View,
    pub exec_cursor: Seq,
    pub stable: Seq,
    pub state: Digest,
    /// Admission cursor for the view-0 leader's timeline.
    pub leader_cursor: Option<u64>,
    pub flagged_leader: bool,
    pub tally: ReplicaTally,
    pub tc_accesses: u64,
    pub certificates_issued: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub id: ClientId,
    pub completed: usize,
    pub retransmissions: u64,
    /// (client_seq, submit time) of the request still outstanding at the end.
    pub outstanding: Option<(u64, Time)>,
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: SimConfig,
    pub verdicts: Verdicts,
    pub tally: NetTally,
    pub replicas: Vec<ReplicaSummary>,
    pub clients: Vec<ClientSummary>,
    pub latencies: Vec<LatencyRecord>,
    pub narrative: Vec<(Time, String)>,
    pub notes: Vec<NoteRecord>,
    pub trace: Trace,
    /// Certificates issued by every component (when auditing was on).
    pub issued: Vec<IssuedRecord>,
    pub end_time: Time,
    /// True if the run ended because nothing was left to happen.
    pub quiescent: bool,
    /// Client operations executed, as seen by the most advanced correct replica.
    pub ops_executed: u64,
    pub batches_executed: u64,
}

/// A deterministic discrete-event run of one configuration.
pub struct Simulation {
    cfg: SimConfig,
    pcfg: Arc<ProtocolConfig>,
    sizes: SizeModel,
    f: u64,
    replicas: Vec<Replica>,
    clients: Vec<Client>,
    remaining: Vec<u64>,
    adversary: Option<Box<dyn Adversary>>,
    controlled: BTreeSet<ReplicaId>,
    byzantine: BTreeSet<ReplicaId>,
    registry: Arc<KeyRegistry>,
    admin: AdminToken,
    queue: BinaryHeap<Reverse<Queued>>,
    next_id: u64,
    now: Time,
    horizon: Time,
    rng: ChaCha20Rng,
    held: Vec<(usize, Endpoint, Endpoint, Message)>,
    tally: NetTally,
    trace: Trace,
    notes: Vec<NoteRecord>,
    narrative: Vec<(Time, String)>,
    latencies: Vec<LatencyRecord>,
}

pub fn run(cfg: &SimConfig) -> Result<RunResult, ConfigError> {
    Ok(Simulation::new(cfg)?.run())
}

impl Simulation {
    pub fn new(cfg: &SimConfig) -> Result<Simulation, ConfigError> {
        cfg.validate()?;
        let n = cfg.n();
        let pcfg = Arc::new(cfg.protocol());
        let dep = Deployment::new(n, cfg.tc(), cfg.seed);
        let directory = Arc::new(ClientDirectory::derive(cfg.seed, cfg.clients as u32));
        let registry = dep.registry.clone();
        let replicas = dep
            .tcs
            .into_iter()
            .enumerate()
            .map(|(i, tc)| Replica::new(ReplicaId(i as u32), pcfg.clone(), tc, registry.clone(), directory.clone()))
            .collect();
        let clients = (0..cfg.clients as u32)
            .map(|c| {
                Client::new(
                    ClientId(c),
                    cfg.seed,
                    n,
                    cfg.f,
                    cfg.reply_policy,
                    cfg.tx_size,
                    ms(cfg.retransmit_ms),
                )
            })
            .collect();
        let adversary = AdversaryRegistry::default()
            .build(&cfg.adversary, cfg.setup())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut sim = Simulation {
            pcfg,
            sizes: cfg.sizes(),
            f: cfg.f as u64,
            replicas,
            clients,
            remaining: vec![cfg.requests_per_client; cfg.clients],
            controlled: adversary.controlled(),
            byzantine: adversary.byzantine(),
            adversary: Some(adversary),
            registry,
            admin: dep.admin,
            queue: BinaryHeap::new(),
            next_id: 0,
            now: 0,
            horizon: ms(cfg.duration_ms),
            rng: seeded_rng(cfg.seed, "network", 0),
            held: Vec::new(),
            tally: NetTally::default(),
            trace: Trace::new(cfg.trace),
            notes: Vec::new(),
            narrative: Vec::new(),
            latencies: Vec::new(),
            cfg: cfg.clone(),
        };
        for (i, p) in sim.cfg.network.partitions.clone().iter().enumerate() {
            sim.schedule(ms(p.end_ms), Event::Heal { partition: i });
        }
        for c in 0..cfg.clients as u32 {
            sim.schedule(0, Event::ClientStart { client: ClientId(c) });
        }
        Ok(sim)
    }

    pub fn protocol(&self) -> &ProtocolConfig {
        &self.pcfg
    }

    fn schedule(&mut self, time: Time, event: Event) {
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push(Reverse(Queued { time, id, event }));
    }

    // ------------------------------------------------------------------
    // network

    fn blocked_by(&self, from: Endpoint, to: Endpoint) -> Option<usize> {
        let (Endpoint::Replica(a), Endpoint::Replica(b)) = (from, to) else {
            return None;
        };
        self.cfg.network.partitions.iter().position(|p| {
            let window = ms(p.start_ms)..ms(p.end_ms);
            window.contains(&self.now) && p.separates(a.0, b.0)
        })
    }

    fn transmit(&mut self, from: Endpoint, to: Endpoint, msg: Message) {
        if from == to {
            return;
        }
        let bytes = self.sizes.wire_size(&msg, self.f);
        self.tally.record(from, to, msg.kind(), bytes);
        let drop_rate = self.cfg.network.drop_rate;
        if drop_rate > 0.0 && self.rng.gen_bool(drop_rate) {
            self.tally.dropped += 1;
            self.trace.send(self.now, from, to, &msg, bytes, "drop");
            return;
        }
        if let Some(p) = self.blocked_by(from, to) {
            self.tally.held += 1;
            self.trace.send(self.now, from, to, &msg, bytes, "hold");
            self.held.push((p, from, to, msg));
            return;
        }
        self.trace.send(self.now, from, to, &msg, bytes, "send");
        self.launch(from, to, msg);
    }

    fn launch(&mut self, from: Endpoint, to: Endpoint, msg: Message) {
        let net = &self.cfg.network;
        let (lo, hi) = (ms(net.min_delay_ms), ms(net.max_delay_ms));
        let delay = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        self.schedule(self.now + delay, Event::Deliver { from, to, msg });
    }

    // ------------------------------------------------------------------
    // replicas

    fn absorb(&mut self, r: ReplicaId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    if self.controlled.contains(&r) {
                        let out = self.with_adversary(|adv, ctx| adv.outgoing(ctx, r, to, msg));
                        for (to, m) in out {
                            self.transmit(Endpoint::Replica(r), to, m);
                        }
                    } else {
                        self.transmit(Endpoint::Replica(r), to, msg);
                    }
                }
                Action::SetTimer { at, timer } => {
                    self.schedule(at.max(self.now), Event::ReplicaTimer { replica: r, timer })
                }
                Action::Note(note) => {
                    self.trace.note(self.now, r, &note);
                    self.notes.push(NoteRecord {
                        t: self.now,
                        replica: r,
                        note,
                    });
                }
            }
        }
    }

    /// Runs a script callback and applies what it asked for.
    fn with_adversary<T>(&mut self, f: impl FnOnce(&mut dyn Adversary, &mut AdvCtx<'_>) -> T) -> T {
        let mut adv = self.adversary.take().expect("adversary re-entered");
        let (result, out) = {
            let mut ctx = AdvCtx::new(self.now, self.cfg.setup(), &self.controlled, &mut self.replicas, &self.admin);
            let result = f(adv.as_mut(), &mut ctx);
            (result, ctx.out)
        };
        self.adversary = Some(adv);
        for line in out.narrative {
            self.trace.adversary(self.now, &line);
            self.narrative.push((self.now, line));
        }
        for (at, tag) in out.wakes {
            self.schedule(at.max(self.now), Event::Wake { tag });
        }
        for (from, to, msg) in out.sends {
            self.transmit(Endpoint::Replica(from), to, msg);
        }
        for r in out.recovered {
            let acts = self.replicas[r.0 as usize].on_tc_recovered(self.now);
            self.absorb(r, acts);
        }
        result
    }

    // ------------------------------------------------------------------
    // clients

    fn client_actions(&mut self, c: ClientId, actions: Vec<ClientAction>) {
        for a in actions {
            match a {
                ClientAction::Send { to, msg } => self.transmit(Endpoint::Client(c), Endpoint::Replica(to), msg),
                ClientAction::Retransmit { at, client_seq } => {
                    self.schedule(at, Event::Retransmit { client: c, client_seq })
                }
            }
        }
    }

    fn client_submit(&mut self, c: ClientId) {
        let i = c.0 as usize;
        if self.cfg.requests_per_client > 0 {
            if self.remaining[i] == 0 {
                return;
            }
            self.remaining[i] -= 1;
        }
        let acts = self.clients[i].submit(self.now);
        self.client_actions(c, acts);
    }

    // ------------------------------------------------------------------

    fn handle(&mut self, event: Event) {
        match event {
            Event::Deliver { from, to, msg } => {
                self.trace.deliver(self.now, from, to, &msg);
                match to {
                    Endpoint::Replica(r) => {
                        let acts = self.replicas[r.0 as usize].on_message(self.now, from, msg);
                        self.absorb(r, acts);
                    }
                    Endpoint::Client(c) => {
                        let Message::Reply(reply) = msg else { return };
                        if let ReplyOutcome::Completed(rec) = self.clients[c.0 as usize].on_reply(self.now, &reply) {
                            self.trace
                                .complete(self.now, c.0, rec.seq, rec.complete_t - rec.submit_t);
                            self.latencies.push(rec);
                            self.client_submit(c);
                        }
                    }
                }
            }
            Event::ReplicaTimer { replica, timer } => {
                self.trace.timer(self.now, replica, &timer);
                let acts = self.replicas[replica.0 as usize].on_timer(self.now, timer);
                self.absorb(replica, acts);
            }
            Event::Retransmit { client, client_seq } => {
                let acts = self.clients[client.0 as usize].on_retransmit(self.now, client_seq);
                self.client_actions(client, acts);
            }
            Event::ClientStart { client } => self.client_submit(client),
            Event::Wake { tag } => self.with_adversary(|adv, ctx| adv.wake(ctx, tag)),
            Event::Heal { partition } => {
                let held = std::mem::take(&mut self.held);
                let released = held.iter().filter(|h| h.0 == partition).count();
                self.trace.event(self.now, "heal", json!({"partition": partition, "released": released}));
                for (p, from, to, msg) in held {
                    if p == partition {
                        self.launch(from, to, msg);
                    } else {
                        self.held.push((p, from, to, msg));
                    }
                }
            }
        }
    }

    pub fn run(mut self) -> RunResult {
        self.with_adversary(|adv, ctx| adv.start(ctx));
        let mut quiescent = true;
        while let Some(Reverse(q)) = self.queue.pop() {
            if q.time > self.horizon {
                quiescent = false;
                break;
            }
            self.now = q.time;
            self.handle(q.event);
        }
        let end_time = if quiescent { self.now } else { self.horizon };
        self.finish(end_time, quiescent)
    }

    fn finish(self, end_time: Time, quiescent: bool) -> RunResult {
        let leader = ReplicaId(0);
        let replicas: Vec<ReplicaSummary> = self
            .replicas
            .iter()
            .map(|r| ReplicaSummary {
                id: r.id(),
                byzantine: self.byzantine.contains(&r.id()),
                tc_available: r.tc().is_available(),
                view: r.view(),
                exec_cursor: r.exec_cursor(),
                stable: r.stable_seq(),
                state: r.state_digest(),
                leader_cursor: r.admission_cursor(leader),
                flagged_leader: r.is_flagged(leader),
                tally: r.tally(),
                tc_accesses: r.tc().access_tally(),
                certificates_issued: r.tc().issued_count(),
            })
            .collect();
        let clients: Vec<ClientSummary> = self
            .clients
            .iter()
            .map(|c| ClientSummary {
                id: c.id(),
                completed: c.completed(),
                retransmissions: c.retransmissions(),
                outstanding: c
                    .in_flight_request()
                    .map(|r| (r.client_seq, c.in_flight_since().unwrap_or(0))),
            })
            .collect();
        let issued: Vec<IssuedRecord> = self
            .replicas
            .iter()
            .flat_map(|r| r.tc().issued_log().iter().cloned())
            .collect();
        let input = oracle::Input {
            n: self.cfg.n(),
            mode: self.cfg.mode,
            byzantine: &self.byzantine,
            replicas: &self.replicas,
            notes: &self.notes,
            clients: &clients,
            issued: &issued,
            registry: &self.registry,
            end_time,
            quiescent,
            stall_after: self.cfg.stall_after(),
        };
        let verdicts = oracle::evaluate(&input);
        let (mut ops, mut batches) = (0u64, 0u64);
        for r in self.replicas.iter().filter(|r| !self.byzantine.contains(&r.id())) {
            let executed: u64 = self
                .notes
                .iter()
                .filter(|n| n.replica == r.id())
                .map(|n| match n.note {
                    Note::Executed { requests, .. } => requests as u64,
                    _ => 0,
                })
                .sum();
            ops = ops.max(executed);
            batches = batches.max(r.exec_cursor());
        }
        RunResult {
            config: self.cfg,
            verdicts,
            tally: self.tally,
            replicas,
            clients,
            latencies: self.latencies,
            narrative: self.narrative,
            notes: self.notes,
            trace: self.trace,
            issued,
            end_time,
            quiescent,
            ops_executed: ops,
            batches_executed: batches,
        }
    }
}
