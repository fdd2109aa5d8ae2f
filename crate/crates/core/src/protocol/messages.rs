//! Wire messages and the hashes their certificates bind to.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, Encoder};
use crate::ids::{ClientId, ReplicaId, Seq, View};
use crate::tc::UniqueIdentifier;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Request {
    pub client: ClientId,
    pub client_seq: u64,
    #[serde(with = "hex_vec")]
    pub payload: Vec<u8>,
    #[serde(with = "hex_vec")]
    pub auth: Vec<u8>,
}

impl Request {
    /// What the client signs.
    pub fn signing_digest(client: ClientId, client_seq: u64, payload: &[u8]) -> Digest {
        let mut e = Encoder::new("request");
        e.u32(client.0).u64(client_seq).bytes(payload);
        e.finish()
    }

    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new("request-full");
        e.u32(self.client.0)
            .u64(self.client_seq)
            .bytes(&self.payload)
            .bytes(&self.auth);
        e.finish()
    }
}

/// An ordered set of requests. An empty batch is the null operation used to
/// fill holes after a view change; it is never proposed otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Batch {
    pub requests: Arc<Vec<Request>>,
    pub digest: Digest,
}

impl Batch {
    pub fn new(requests: Vec<Request>) -> Batch {
        let mut e = Encoder::new("batch");
        e.u32(requests.len() as u32);
        for r in &requests {
            e.digest(&r.digest());
        }
        Batch {
            digest: e.finish(),
            requests: Arc::new(requests),
        }
    }

    pub fn null() -> Batch {
        Batch::new(Vec::new())
    }

    pub fn is_null(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Recomputes the digest from the contents.
    pub fn well_formed(&self) -> bool {
        Batch::new(self.requests.as_ref().clone()).digest == self.digest
    }
}

pub fn prepare_hash(view: View, seq: Seq, batch: &Digest) -> Digest {
    let mut e = Encoder::new("prepare");
    e.u64(view).u64(seq).digest(batch);
    e.finish()
}

pub fn commit_hash(view: View, seq: Seq, replica: ReplicaId, batch: &Digest) -> Digest {
    let mut e = Encoder::new("commit");
    e.u64(view).u64(seq).u32(replica.0).digest(batch);
    e.finish()
}

pub fn checkpoint_hash(seq: Seq, replica: ReplicaId, state: &Digest) -> Digest {
    let mut e = Encoder::new("checkpoint");
    e.u64(seq).u32(replica.0).digest(state);
    e.finish()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prepare {
    pub view: View,
    pub seq: Seq,
    pub batch: Batch,
    pub ui: UniqueIdentifier,
}

impl Prepare {
    pub fn hash(&self) -> Digest {
        prepare_hash(self.view, self.seq, &self.batch.digest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Commit {
    pub view: View,
    pub seq: Seq,
    pub replica: ReplicaId,
    pub digest: Digest,
    pub ui: UniqueIdentifier,
}

impl Commit {
    pub fn hash(&self) -> Digest {
        commit_hash(self.view, self.seq, self.replica, &self.digest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttestationKind {
    Prepare,
    Commit,
}

/// One certified vote for (view, seq, digest): the leader's Prepare or a Commit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attestation {
    pub replica: ReplicaId,
    pub kind: AttestationKind,
    pub ui: UniqueIdentifier,
}

/// Post-commit notification carrying a commit proof. Not certified itself.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
    pub sender: ReplicaId,
    pub proof: Vec<Attestation>,
    /// Size accounting only: the proof is charged as one constant-size
    /// threshold signature instead of f+1 certificates.
    pub threshold: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reply {
    pub client: ClientId,
    pub client_seq: u64,
    pub seq: Seq,
    pub replica: ReplicaId,
    pub result: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seq: Seq,
    pub replica: ReplicaId,
    pub state: Digest,
    pub ui: UniqueIdentifier,
}

impl Checkpoint {
    pub fn hash(&self) -> Digest {
        checkpoint_hash(self.seq, self.replica, &self.state)
    }
}

/// f+1 matching checkpoint messages.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CheckpointCert {
    pub seq: Seq,
    pub state: Digest,
    pub votes: Vec<Checkpoint>,
}

/// Compact form of a certified message in a view-change log.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LogEntry {
    Prepare {
        view: View,
        seq: Seq,
        digest: Digest,
        ui: UniqueIdentifier,
    },
    Commit {
        view: View,
        seq: Seq,
        digest: Digest,
        ui: UniqueIdentifier,
    },
    Checkpoint {
        seq: Seq,
        state: Digest,
        ui: UniqueIdentifier,
    },
    ViewChange {
        new_view: View,
        content: Digest,
        ui: UniqueIdentifier,
    },
    NewView {
        view: View,
        content: Digest,
        ui: UniqueIdentifier,
    },
}

impl LogEntry {
    pub fn ui(&self) -> &UniqueIdentifier {
        match self {
            LogEntry::Prepare { ui, .. }
            | LogEntry::Commit { ui, .. }
            | LogEntry::Checkpoint { ui, .. }
            | LogEntry::ViewChange { ui, .. }
            | LogEntry::NewView { ui, .. } => ui,
        }
    }

    /// The hash the entry's certificate must bind to.
    pub fn expected_hash(&self, sender: ReplicaId) -> Digest {
        match self {
            LogEntry::Prepare {
                view, seq, digest, ..
            } => prepare_hash(*view, *seq, digest),
            LogEntry::Commit {
                view, seq, digest, ..
            } => commit_hash(*view, *seq, sender, digest),
            LogEntry::Checkpoint { seq, state, .. } => checkpoint_hash(*seq, sender, state),
            LogEntry::ViewChange { content, .. } | LogEntry::NewView { content, .. } => *content,
        }
    }

    /// (view, seq, digest) for ordering entries.
    pub fn slot(&self) -> Option<(View, Seq, Digest)> {
        match self {
            LogEntry::Prepare {
                view, seq, digest, ..
            }
            | LogEntry::Commit {
                view, seq, digest, ..
            } => Some((*view, *seq, *digest)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewChange {
    pub new_view: View,
    pub sender: ReplicaId,
    pub stable: Option<CheckpointCert>,
    /// The sender's own checkpoint message for the stable seq; its timeline
    /// value is where the log must start.
    pub base: Option<Checkpoint>,
    /// Every message the sender certified since `base` (plus older entries
    /// still concerning seqs above the stable checkpoint).
    pub log: Vec<LogEntry>,
    /// Leader Prepares backing the Prepare/Commit entries, with full batches.
    pub prepares: Vec<Prepare>,
    /// New-view messages that justify prepares of views above 0.
    pub new_views: Vec<NewView>,
    pub ui: UniqueIdentifier,
}

impl ViewChange {
    pub fn content_digest(
        new_view: View,
        sender: ReplicaId,
        stable: &Option<CheckpointCert>,
        base: &Option<Checkpoint>,
        log: &[LogEntry],
        prepares: &[Prepare],
        new_views: &[NewView],
    ) -> Digest {
        let mut e = Encoder::new("view-change");
        e.u64(new_view).u32(sender.0);
        match stable {
            Some(c) => e.u64(c.seq).digest(&c.state),
            None => e.u64(0).digest(&Digest::ZERO),
        };
        match base {
            Some(b) => e.u64(b.ui.value).digest(&b.hash()),
            None => e.u64(0).digest(&Digest::ZERO),
        };
        e.u32(new_views.len() as u32);
        for nv in new_views {
            e.digest(&nv.hash());
        }
        e.u32(log.len() as u32);
        for entry in log {
            let ui = entry.ui();
            e.u64(ui.value).digest(&ui.msg_hash);
        }
        e.u32(prepares.len() as u32);
        for p in prepares {
            e.digest(&p.hash()).u64(p.ui.value);
        }
        e.finish()
    }

    pub fn hash(&self) -> Digest {
        ViewChange::content_digest(
            self.new_view,
            self.sender,
            &self.stable,
            &self.base,
            &self.log,
            &self.prepares,
            &self.new_views,
        )
    }

    pub fn stable_seq(&self) -> Seq {
        self.stable.as_ref().map_or(0, |c| c.seq)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NewView {
    pub view: View,
    pub sender: ReplicaId,
    pub vcs: Vec<ViewChange>,
    pub ui: UniqueIdentifier,
}

impl NewView {
    pub fn content_digest(view: View, sender: ReplicaId, vcs: &[ViewChange]) -> Digest {
        let mut e = Encoder::new("new-view");
        e.u64(view).u32(sender.0).u32(vcs.len() as u32);
        for vc in vcs {
            e.digest(&vc.hash());
        }
        e.finish()
    }

    pub fn hash(&self) -> Digest {
        NewView::content_digest(self.view, self.sender, &self.vcs)
    }
}

/// Service state shipped during state transfer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub seq: Seq,
    pub service: super::service::KvService,
    pub last_executed: Vec<(ClientId, u64, Reply)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Request(Request),
    Prepare(Prepare),
    Commit(Commit),
    Decision(Decision),
    Reply(Reply),
    Checkpoint(Checkpoint),
    ViewChange(Box<ViewChange>),
    NewView(Box<NewView>),
    FetchBatch { digest: Digest },
    BatchReply { batch: Batch },
    StateRequest { seq: Seq },
    StateReply { snapshot: Box<StateSnapshot> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    Request,
    Prepare,
    Commit,
    Decision,
    Reply,
    Checkpoint,
    ViewChange,
    NewView,
    FetchBatch,
    BatchReply,
    StateRequest,
    StateReply,
}

impl MsgKind {
    pub const ALL: [MsgKind; 12] = [
        MsgKind::Request,
        MsgKind::Prepare,
        MsgKind::Commit,
        MsgKind::Decision,
        MsgKind::Reply,
        MsgKind::Checkpoint,
        MsgKind::ViewChange,
        MsgKind::NewView,
        MsgKind::FetchBatch,
        MsgKind::BatchReply,
        MsgKind::StateRequest,
        MsgKind::StateReply,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::Request => "request",
            MsgKind::Prepare => "prepare",
            MsgKind::Commit => "commit",
            MsgKind::Decision => "decision",
            MsgKind::Reply => "reply",
            MsgKind::Checkpoint => "checkpoint",
            MsgKind::ViewChange => "view_change",
            MsgKind::NewView => "new_view",
            MsgKind::FetchBatch => "fetch_batch",
            MsgKind::BatchReply => "batch_reply",
            MsgKind::StateRequest => "state_request",
            MsgKind::StateReply => "state_reply",
        }
    }
}

impl Message {
    pub fn kind(&self) -> MsgKind {
        match self {
            Message::Request(_) => MsgKind::Request,
            Message::Prepare(_) => MsgKind::Prepare,
            Message::Commit(_) => MsgKind::Commit,
            Message::Decision(_) => MsgKind::Decision,
            Message::Reply(_) => MsgKind::Reply,
            Message::Checkpoint(_) => MsgKind::Checkpoint,
            Message::ViewChange(_) => MsgKind::ViewChange,
            Message::NewView(_) => MsgKind::NewView,
            Message::FetchBatch { .. } => MsgKind::FetchBatch,
            Message::BatchReply { .. } => MsgKind::BatchReply,
            Message::StateRequest { .. } => MsgKind::StateRequest,
            Message::StateReply { .. } => MsgKind::StateReply,
        }
    }

    /// The sender's certificate, for messages that carry one.
    pub fn ui(&self) -> Option<&UniqueIdentifier> {
        match self {
            Message::Prepare(p) => Some(&p.ui),
            Message::Commit(c) => Some(&c.ui),
            Message::Checkpoint(c) => Some(&c.ui),
            Message::ViewChange(v) => Some(&v.ui),
            Message::NewView(nv) => Some(&nv.ui),
            _ => None,
        }
    }

    /// Hash the sender's certificate must bind to.
    pub fn certified_hash(&self) -> Option<Digest> {
        match self {
            Message::Prepare(p) => Some(p.hash()),
            Message::Commit(c) => Some(c.hash()),
            Message::Checkpoint(c) => Some(c.hash()),
            Message::ViewChange(v) => Some(v.hash()),
            Message::NewView(nv) => Some(nv.hash()),
            _ => None,
        }
    }

    /// Compact log form of a certified message.
    pub fn log_entry(&self) -> Option<LogEntry> {
        Some(match self {
            Message::Prepare(p) => LogEntry::Prepare {
                view: p.view,
                seq: p.seq,
                digest: p.batch.digest,
                ui: p.ui.clone(),
            },
            Message::Commit(c) => LogEntry::Commit {
                view: c.view,
                seq: c.seq,
                digest: c.digest,
                ui: c.ui.clone(),
            },
            Message::Checkpoint(c) => LogEntry::Checkpoint {
                seq: c.seq,
                state: c.state,
                ui: c.ui.clone(),
            },
            Message::ViewChange(v) => LogEntry::ViewChange {
                new_view: v.new_view,
                content: v.hash(),
                ui: v.ui.clone(),
            },
            Message::NewView(nv) => LogEntry::NewView {
                view: nv.view,
                content: nv.hash(),
                ui: nv.ui.clone(),
            },
            _ => return None,
        })
    }
}

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
