//! Global verdicts over a finished run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::world::{ClientSummary, NoteRecord};
use crate::crypto::Digest;
use crate::ids::{ClientId, ReplicaId, Seq, Time, View};
use crate::protocol::{Mode, Note, Replica};
use crate::tc::{ContextId, IssuedRecord, KeyRegistry};

#[derive(Clone, Debug, Hash, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ConflictingCommits {
        seq: Seq,
        first: (ReplicaId, Digest),
        second: (ReplicaId, Digest),
    },
    ConflictingPrepares {
        view: View,
        seq: Seq,
        first: (ReplicaId, Digest),
        second: (ReplicaId, Digest),
    },
    ExecutionOrder {
        replica: ReplicaId,
        expected: Seq,
        got: Seq,
    },
    StateDivergence {
        seq: Seq,
        first: (ReplicaId, Digest),
        second: (ReplicaId, Digest),
    },
    DuplicateContext {
        replica: ReplicaId,
        context: ContextId,
        certificates: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Safety {
    Ok,
    Violated { details: Vec<Violation> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Liveness {
    AllCommitted,
    /// Stale client requests no correct replica executed.
    Stalled { requests: Vec<(ClientId, u64)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Responsiveness {
    Completed,
    Stalled { client_seq: u64, since: Time },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientVerdict {
    pub client: ClientId,
    pub completed: usize,
    pub verdict: Responsiveness,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Ok,
    /// Correct replicas with a working component that miss seqs some other
    /// correct replica committed.
    Lagging { replicas: Vec<(ReplicaId, Vec<Seq>)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub safety: Safety,
    pub liveness: Liveness,
    pub responsiveness: Vec<ClientVerdict>,
    pub termination: Termination,
}

impl Verdicts {
    pub fn safe(&self) -> bool {
        self.safety == Safety::Ok
    }

    pub fn live(&self) -> bool {
        self.liveness == Liveness::AllCommitted
    }

    pub fn all_responsive(&self) -> bool {
        self.responsiveness
            .iter()
            .all(|c| c.verdict == Responsiveness::Completed)
    }

    pub fn stalled_clients(&self) -> Vec<ClientId> {
        self.responsiveness
            .iter()
            .filter(|c| c.verdict != Responsiveness::Completed)
            .map(|c| c.client)
            .collect()
    }

    pub fn violations(&self) -> &[Violation] {
        match &self.safety {
            Safety::Ok => &[],
            Safety::Violated { details } => details,
        }
    }
}

pub(crate) struct Input<'a> {
    pub n: usize,
    pub mode: Mode,
    pub byzantine: &'a BTreeSet<ReplicaId>,
    pub replicas: &'a [Replica],
    pub notes: &'a [NoteRecord],
    pub clients: &'a [ClientSummary],
    pub issued: &'a [IssuedRecord],
    pub registry: &'a KeyRegistry,
    pub end_time: Time,
    pub quiescent: bool,
    pub stall_after: Time,
}

/// Incremental agreement checker over protocol notes of correct replicas.
#[derive(Clone, Debug, Default, Hash, PartialEq, Eq)]
pub struct AgreementCheck {
    committed: BTreeMap<Seq, (ReplicaId, Digest)>,
    prepared: BTreeMap<(View, Seq), (ReplicaId, Digest)>,
    states: BTreeMap<Seq, (ReplicaId, Digest)>,
    cursors: BTreeMap<ReplicaId, Seq>,
    pub violations: Vec<Violation>,
}

impl AgreementCheck {
    pub fn observe(&mut self, r: ReplicaId, note: &Note) {
        match *note {
            Note::Committed { seq, digest, .. } => match self.committed.get(&seq) {
                None => {
                    self.committed.insert(seq, (r, digest));
                }
                Some(&(other, d)) if d != digest => {
                    self.violations.push(Violation::ConflictingCommits {
                        seq,
                        first: (other, d),
                        second: (r, digest),
                    });
                }
                _ => {}
            },
            Note::Prepared { view, seq, digest } => match self.prepared.get(&(view, seq)) {
                None => {
                    self.prepared.insert((view, seq), (r, digest));
                }
                Some(&(other, d)) if d != digest => {
                    self.violations.push(Violation::ConflictingPrepares {
                        view,
                        seq,
                        first: (other, d),
                        second: (r, digest),
                    });
                }
                _ => {}
            },
            Note::Executed { seq, state, .. } => {
                let cursor = self.cursors.entry(r).or_insert(0);
                if seq != *cursor + 1 {
                    self.violations.push(Violation::ExecutionOrder {
                        replica: r,
                        expected: *cursor + 1,
                        got: seq,
                    });
                }
                *cursor = seq;
                match self.states.get(&seq) {
                    None => {
                        self.states.insert(seq, (r, state));
                    }
                    Some(&(other, d)) if d != state => {
                        self.violations.push(Violation::StateDivergence {
                            seq,
                            first: (other, d),
                            second: (r, state),
                        });
                    }
                    _ => {}
                }
            }
            Note::StateTransferred { seq } => {
                let cursor = self.cursors.entry(r).or_insert(0);
                *cursor = (*cursor).max(seq);
            }
            _ => {}
        }
    }

    pub fn committed_seqs(&self) -> impl Iterator<Item = Seq> + '_ {
        self.committed.keys().copied()
    }
}

/// Certificates bound to the same context by one registered component.
pub fn duplicate_contexts(issued: &[IssuedRecord], registry: &KeyRegistry) -> Vec<Violation> {
    let mut per: BTreeMap<(ReplicaId, ContextId), usize> = BTreeMap::new();
    for rec in issued {
        if let Some(ctx) = rec.context {
            if registry.is_registered(&rec.tc) {
                *per.entry((rec.tc.replica, ctx)).or_default() += 1;
            }
        }
    }
    per.into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|((replica, context), certificates)| Violation::DuplicateContext {
            replica,
            context,
            certificates,
        })
        .collect()
}

pub(crate) fn evaluate(input: &Input<'_>) -> Verdicts {
    let correct = |r: ReplicaId| !input.byzantine.contains(&r);
    let mut check = AgreementCheck::default();
    let mut committed_by: BTreeMap<ReplicaId, BTreeSet<Seq>> = BTreeMap::new();
    for n in input.notes.iter().filter(|n| correct(n.replica)) {
        check.observe(n.replica, &n.note);
        if let Note::Committed { seq, .. } = n.note {
            committed_by.entry(n.replica).or_default().insert(seq);
        }
    }
    let mut violations = check.violations.clone();
    if input.mode == Mode::Prevention {
        violations.extend(duplicate_contexts(input.issued, input.registry));
    }
    let safety = if violations.is_empty() {
        Safety::Ok
    } else {
        Safety::Violated {
            details: violations,
        }
    };

    let stale = |since: Time| input.quiescent || input.end_time.saturating_sub(since) >= input.stall_after;
    let mut responsiveness = Vec::new();
    let mut unexecuted = Vec::new();
    for c in input.clients {
        let verdict = match c.outstanding {
            Some((seq, since)) if stale(since) => {
                let executed = input.replicas.iter().any(|r| {
                    correct(r.id()) && r.last_executed(c.id).is_some_and(|s| s >= seq)
                });
                if !executed {
                    unexecuted.push((c.id, seq));
                }
                Responsiveness::Stalled {
                    client_seq: seq,
                    since,
                }
            }
            _ => Responsiveness::Completed,
        };
        responsiveness.push(ClientVerdict {
            client: c.id,
            completed: c.completed,
            verdict,
        });
    }
    let liveness = if unexecuted.is_empty() {
        Liveness::AllCommitted
    } else {
        Liveness::Stalled {
            requests: unexecuted,
        }
    };

    let all: BTreeSet<Seq> = check.committed_seqs().collect();
    let mut lagging = Vec::new();
    for r in input.replicas {
        if !correct(r.id()) || !r.tc().is_available() {
            continue;
        }
        let mine = committed_by.get(&r.id());
        let missing: Vec<Seq> = all
            .iter()
            .copied()
            .filter(|s| *s > r.exec_cursor() && !mine.is_some_and(|m| m.contains(s)))
            .take(16)
            .collect();
        if !missing.is_empty() {
            lagging.push((r.id(), missing));
        }
    }
    debug_assert!(input.n == input.replicas.len());
    let termination = if lagging.is_empty() {
        Termination::Ok
    } else {
        Termination::Lagging { replicas: lagging }
    };
    Verdicts {
        safety,
        liveness,
        responsiveness,
        termination,
    }
}
