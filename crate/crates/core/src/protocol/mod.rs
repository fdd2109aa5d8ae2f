//! The replication protocol: a MinBFT-style two-phase hybrid protocol for
//! n = 2f+1 replicas, with batching, pipelining, checkpoints, view change and
//! post-commit Decision messages that restore client responsiveness.
//!
//! Replicas are pure event-driven state machines. They receive messages and
//! timer expirations and answer with [`Action`]s; the simulator owns time and
//! the network.

mod messages;
mod replica;
mod service;
mod viewchange;

use serde::{Deserialize, Serialize};

pub use messages::*;
pub use replica::{Replica, ReplicaTally};
pub use service::{KvOp, KvService};
pub use viewchange::{plan_new_view, NewViewPlan};

use crate::crypto::Digest;
use crate::ids::{Endpoint, ReplicaId, Seq, Time, View, MILLIS};

/// How replicas stop a faulty leader from equivocating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One gapless certified timeline per replica; conflicts are detected.
    Detection,
    /// Per-phase context certificates; conflicts cannot be certified.
    Prevention,
}

/// Which counters followers accept for a peer's timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterAcceptance {
    /// Only the counter fixed at deployment.
    Pinned,
    /// A peer may switch to a counter it announces by using it from value 1.
    LeaderAnnounced,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub f: usize,
    pub n: usize,
    pub batch_size: usize,
    pub batch_timeout: Time,
    pub checkpoint_interval: Seq,
    /// Maximum number of seqs beyond the last stable checkpoint.
    pub window: Seq,
    pub pipelining: bool,
    /// Proposals in flight when pipelining is on.
    pub pipeline_depth: Seq,
    pub decisions: bool,
    pub decision_delay: Time,
    pub threshold_proofs: bool,
    pub mode: Mode,
    pub counter_acceptance: CounterAcceptance,
    pub view_change_timeout: Time,
    /// How long a replica waits for a batch it knows only by digest before fetching it.
    pub fetch_delay: Time,
}

impl ProtocolConfig {
    pub fn new(f: usize) -> Self {
        ProtocolConfig {
            f,
            n: 2 * f + 1,
            batch_size: 1,
            batch_timeout: 6 * MILLIS,
            checkpoint_interval: 100,
            window: 200,
            pipelining: true,
            pipeline_depth: 4,
            decisions: true,
            decision_delay: 6 * MILLIS,
            threshold_proofs: false,
            mode: Mode::Detection,
            counter_acceptance: CounterAcceptance::Pinned,
            view_change_timeout: 200 * MILLIS,
            fetch_delay: 10 * MILLIS,
        }
    }

    pub fn quorum(&self) -> usize {
        self.f + 1
    }

    pub fn leader(&self, view: View) -> ReplicaId {
        crate::ids::leader_of(view, self.n)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "timer", rename_all = "snake_case")]
pub enum Timer {
    Batch { generation: u64 },
    Suspicion { generation: u64 },
    ViewChange { view: View },
    Decision { seq: Seq },
    Fetch { seq: Seq },
    StateTransfer { seq: Seq, attempt: u32 },
}

/// How a replica came to commit a seq.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitPath {
    Quorum,
    Decision,
    StateTransfer,
}

/// Observable protocol events; the simulator records them and the oracles
/// evaluate them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum Note {
    Prepared {
        view: View,
        seq: Seq,
        digest: Digest,
    },
    Committed {
        view: View,
        seq: Seq,
        digest: Digest,
        path: CommitPath,
    },
    Executed {
        seq: Seq,
        requests: usize,
        state: Digest,
    },
    StableCheckpoint {
        seq: Seq,
    },
    LeaderFlagged {
        leader: ReplicaId,
        value: u64,
    },
    Gap {
        sender: ReplicaId,
        cursor: u64,
        buffered: u64,
    },
    ViewChangeStarted {
        view: View,
    },
    ViewInstalled {
        view: View,
    },
    TcFailure {
        op: String,
    },
    StateTransferred {
        seq: Seq,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Send { to: Endpoint, msg: Message },
    SetTimer { at: Time, timer: Timer },
    Note(Note),
}
