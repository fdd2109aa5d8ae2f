//! Exhaustive small-model exploration: three replicas, a scripted faulty
//! leader, and every order in which pending messages can be delivered and
//! pending timers can fire, up to a step bound. States already seen are not
//! expanded again.

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rustc_hash::{FxHashSet, FxHasher};

use crate::adversary::{AdvCtx, Adversary, AdversaryRegistry, AdversarySpec, Setup};
use crate::clients::{Client, ClientAction, ReplyPolicy};
use crate::crypto::ClientDirectory;
use crate::ids::{ClientId, Endpoint, ReplicaId};
use crate::protocol::{Action, Message, Mode, ProtocolConfig, Replica, Timer};
use crate::tc::{AdminToken, CertMode, Deployment, TcConfig};

use super::oracle::{AgreementCheck, Violation};

#[derive(Clone, Debug)]
pub struct ExploreConfig {
    pub script: AdversarySpec,
    pub mode: Mode,
    /// One request from each of this many clients, already delivered to
    /// every replica when exploration starts.
    pub requests: u32,
    pub max_steps: usize,
    pub pipelining: bool,
    pub decisions: bool,
    /// Timeouts that would move a replica beyond this view are never fired.
    pub max_view: u64,
    /// Give up (and report truncation) after this many distinct states.
    pub max_states: usize,
    pub seed: u64,
}

impl ExploreConfig {
    pub fn new(script: AdversarySpec) -> Self {
        ExploreConfig {
            script,
            mode: Mode::Detection,
            requests: 2,
            max_steps: 24,
            pipelining: false,
            decisions: true,
            max_view: 1,
            max_states: 2_000_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExploreReport {
    pub states: usize,
    pub transitions: u64,
    pub deepest: usize,
    /// States in which some correct replica had installed a later view.
    pub view_change_states: usize,
    /// States in which a correct replica executed something.
    pub executed_states: usize,
    pub violations: Vec<Violation>,
    pub truncated: bool,
}

#[derive(Clone)]
struct Node {
    replicas: Vec<Replica>,
    adversary: Box<dyn Adversary>,
    inflight: Vec<(ReplicaId, ReplicaId, Message)>,
    timers: Vec<(ReplicaId, Timer)>,
    check: AgreementCheck,
}

struct Model {
    setup: Setup,
    admin: AdminToken,
    correct: Vec<bool>,
}

impl Model {
    fn absorb(&self, node: &mut Node, r: ReplicaId, actions: Vec<Action>) {
        let controlled = node.adversary.controlled();
        for a in actions {
            match a {
                Action::Send { to, msg } => {
                    let out = if controlled.contains(&r) {
                        self.script(node, |adv, ctx| adv.outgoing(ctx, r, to, msg))
                    } else {
                        vec![(to, msg)]
                    };
                    for (to, m) in out {
                        if let Endpoint::Replica(t) = to {
                            if t != r {
                                node.inflight.push((r, t, m));
                            }
                        }
                    }
                }
                Action::SetTimer { timer, .. } => {
                    if !node.timers.contains(&(r, timer.clone())) {
                        node.timers.push((r, timer));
                    }
                }
                Action::Note(note) => {
                    if self.correct[r.0 as usize] {
                        node.check.observe(r, &note);
                    }
                }
            }
        }
    }

    fn script<T>(&self, node: &mut Node, f: impl FnOnce(&mut dyn Adversary, &mut AdvCtx<'_>) -> T) -> T {
        let controlled = node.adversary.controlled();
        let mut adv = node.adversary.clone();
        let (res, out) = {
            let mut ctx = AdvCtx::new(0, self.setup, &controlled, &mut node.replicas, &self.admin);
            let res = f(adv.as_mut(), &mut ctx);
            (res, ctx.out)
        };
        node.adversary = adv;
        for (from, to, msg) in out.sends {
            if let Endpoint::Replica(t) = to {
                node.inflight.push((from, t, msg));
            }
        }
        for r in out.recovered {
            let acts = node.replicas[r.0 as usize].on_tc_recovered(0);
            self.absorb(node, r, acts);
        }
        res
    }

    fn fingerprint(&self, node: &Node) -> u64 {
        let mut h = FxHasher::default();
        node.replicas.hash(&mut h);
        let mut packets: Vec<u64> = node
            .inflight
            .iter()
            .map(|p| {
                let mut ph = FxHasher::default();
                p.hash(&mut ph);
                ph.finish()
            })
            .collect();
        packets.sort_unstable();
        packets.hash(&mut h);
        let mut timers = node.timers.clone();
        timers.sort();
        timers.hash(&mut h);
        node.adversary.fingerprint().hash(&mut h);
        node.check.hash(&mut h);
        h.finish()
    }
}

pub fn explore(cfg: &ExploreConfig) -> ExploreReport {
    let f = 1;
    let n = 3;
    let setup = Setup { f, n, mode: cfg.mode };
    let mut pcfg = ProtocolConfig::new(f);
    pcfg.mode = cfg.mode;
    pcfg.pipelining = cfg.pipelining;
    pcfg.decisions = cfg.decisions;
    pcfg.checkpoint_interval = 1000;
    pcfg.window = 1000;
    // Decisions go out as soon as a follower commits; a delay would only add
    // timer interleavings that suppress some of them.
    pcfg.decision_delay = 0;
    let pcfg = Arc::new(pcfg);
    let tcc = TcConfig {
        mode: CertMode::Hmac,
        ..TcConfig::default()
    };
    let dep = Deployment::new(n, tcc, cfg.seed);
    let directory = Arc::new(ClientDirectory::derive(cfg.seed, cfg.requests));
    let replicas: Vec<Replica> = dep
        .tcs
        .into_iter()
        .enumerate()
        .map(|(i, tc)| Replica::new(ReplicaId(i as u32), pcfg.clone(), tc, dep.registry.clone(), directory.clone()))
        .collect();
    let adversary = AdversaryRegistry::default()
        .build(&cfg.script, setup)
        .expect("exploration script");
    let byz = adversary.byzantine();
    let model = Model {
        setup,
        admin: dep.admin,
        correct: (0..n as u32).map(|r| !byz.contains(&ReplicaId(r))).collect(),
    };
    let mut root = Node {
        replicas,
        adversary,
        inflight: Vec::new(),
        timers: Vec::new(),
        check: AgreementCheck::default(),
    };
    model.script(&mut root, |adv, ctx| adv.start(ctx));
    for c in 0..cfg.requests {
        let mut client = Client::new(ClientId(c), cfg.seed, n, f, ReplyPolicy::FPlusOne, 16, 0);
        for a in client.submit(0) {
            if let ClientAction::Send { to, msg } = a {
                let acts = root.replicas[to.0 as usize].on_message(0, Endpoint::Client(ClientId(c)), msg);
                model.absorb(&mut root, to, acts);
            }
        }
    }

    let mut report = ExploreReport::default();
    let mut seen: FxHashSet<u64> = FxHashSet::default();
    seen.insert(model.fingerprint(&root));
    report.states = 1;
    let mut stack = vec![(root, 0usize)];
    while let Some((node, depth)) = stack.pop() {
        report.deepest = report.deepest.max(depth);
        if !node.check.violations.is_empty() {
            for v in &node.check.violations {
                if !report.violations.contains(v) {
                    report.violations.push(v.clone());
                }
            }
            continue;
        }
        let moved = node
            .replicas
            .iter()
            .any(|r| model.correct[r.id().0 as usize] && r.view() > 0 && !r.in_view_change());
        if moved {
            report.view_change_states += 1;
        }
        if node
            .replicas
            .iter()
            .any(|r| model.correct[r.id().0 as usize] && r.exec_cursor() > 0)
        {
            report.executed_states += 1;
        }
        if depth >= cfg.max_steps {
            continue;
        }
        let timers: Vec<usize> = (0..node.timers.len())
            .filter(|&j| {
                let (r, t) = &node.timers[j];
                let rep = &node.replicas[r.0 as usize];
                rep.timer_target_view(t).is_none_or(|v| v <= cfg.max_view)
            })
            .map(|j| node.inflight.len() + j)
            .collect();
        for i in (0..node.inflight.len()).chain(timers) {
            let mut next = node.clone();
            if i < next.inflight.len() {
                let (from, to, msg) = next.inflight.swap_remove(i);
                let acts = next.replicas[to.0 as usize].on_message(0, Endpoint::Replica(from), msg);
                model.absorb(&mut next, to, acts);
            } else {
                let (r, timer) = next.timers.swap_remove(i - node.inflight.len());
                let acts = next.replicas[r.0 as usize].on_timer(0, timer);
                model.absorb(&mut next, r, acts);
            }
            let reps = &next.replicas;
            next.timers.retain(|(r, t)| reps[r.0 as usize].timer_is_live(t));
            report.transitions += 1;
            if !seen.insert(model.fingerprint(&next)) {
                continue;
            }
            report.states += 1;
            if report.states >= cfg.max_states {
                report.truncated = true;
                return report;
            }
            stack.push((next, depth + 1));
        }
    }
    report
}
