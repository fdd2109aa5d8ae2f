use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::TraceLevel;
use crate::ids::{Endpoint, ReplicaId, Time};
use crate::protocol::{Message, MsgKind, Note, Timer};

/// Which way a message travels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkClass {
    ClientToReplica,
    ReplicaToClient,
    ReplicaToReplica,
}

impl LinkClass {
    pub fn of(from: Endpoint, to: Endpoint) -> LinkClass {
        match (from, to) {
            (Endpoint::Client(_), _) => LinkClass::ClientToReplica,
            (_, Endpoint::Client(_)) => LinkClass::ReplicaToClient,
            _ => LinkClass::ReplicaToReplica,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub msgs: u64,
    pub bytes: u64,
}

impl Count {
    fn add(&mut self, bytes: u64) {
        self.msgs += 1;
        self.bytes += bytes;
    }
}

/// Messages put on the network, by kind and by link class.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetTally {
    pub by_kind: BTreeMap<MsgKind, Count>,
    pub by_link: BTreeMap<LinkClass, Count>,
    pub dropped: u64,
    pub held: u64,
}

/// Kinds that make up the ordering of client operations; everything else
/// (checkpoints, view changes, fetches, state transfer) is control traffic.
pub const ORDERING: [MsgKind; 5] = [
    MsgKind::Request,
    MsgKind::Reply,
    MsgKind::Prepare,
    MsgKind::Commit,
    MsgKind::Decision,
];

impl NetTally {
    pub(crate) fn record(&mut self, from: Endpoint, to: Endpoint, kind: MsgKind, bytes: u64) {
        self.by_kind.entry(kind).or_default().add(bytes);
        self.by_link.entry(LinkClass::of(from, to)).or_default().add(bytes);
    }

    pub fn kind(&self, kind: MsgKind) -> Count {
        self.by_kind.get(&kind).copied().unwrap_or_default()
    }

    pub fn ordering(&self) -> Count {
        ORDERING.iter().fold(Count::default(), |acc, k| {
            let c = self.kind(*k);
            Count {
                msgs: acc.msgs + c.msgs,
                bytes: acc.bytes + c.bytes,
            }
        })
    }

    pub fn total(&self) -> Count {
        self.by_kind.values().fold(Count::default(), |acc, c| Count {
            msgs: acc.msgs + c.msgs,
            bytes: acc.bytes + c.bytes,
        })
    }
}

/// JSON-lines event log.
#[derive(Clone, Debug)]
pub struct Trace {
    level: TraceLevel,
    lines: Vec<String>,
}

fn ep(e: Endpoint) -> String {
    e.to_string()
}

impl Trace {
    pub fn new(level: TraceLevel) -> Self {
        Trace {
            level,
            lines: Vec::new(),
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn into_lines(self) -> Vec<String> {
        self.lines
    }

    fn push(&mut self, v: serde_json::Value) {
        self.lines.push(v.to_string());
    }

    fn notes(&self) -> bool {
        self.level != TraceLevel::Off
    }

    fn full(&self) -> bool {
        self.level == TraceLevel::Full
    }

    pub(crate) fn send(&mut self, t: Time, from: Endpoint, to: Endpoint, msg: &Message, bytes: u64, fate: &str) {
        if self.full() {
            let mut v = json!({"t": t, "ev": fate, "from": ep(from), "to": ep(to), "kind": msg.kind().name(), "bytes": bytes});
            if let Some(ui) = msg.ui() {
                v["ui"] = json!(ui.value);
            }
            self.push(v);
        }
    }

    pub(crate) fn deliver(&mut self, t: Time, from: Endpoint, to: Endpoint, msg: &Message) {
        if self.full() {
            self.push(json!({"t": t, "ev": "deliver", "from": ep(from), "to": ep(to), "kind": msg.kind().name()}));
        }
    }

    pub(crate) fn timer(&mut self, t: Time, r: ReplicaId, timer: &Timer) {
        if self.notes() {
            self.push(json!({"t": t, "ev": "timer", "replica": r.0, "timer": timer}));
        }
    }

    pub(crate) fn note(&mut self, t: Time, r: ReplicaId, note: &Note) {
        if self.notes() {
            self.push(json!({"t": t, "ev": "note", "replica": r.0, "note": note}));
        }
    }

    pub(crate) fn complete(&mut self, t: Time, client: u32, seq: u64, latency: Time) {
        if self.notes() {
            self.push(json!({"t": t, "ev": "complete", "client": client, "seq": seq, "latency": latency}));
        }
    }

    pub(crate) fn adversary(&mut self, t: Time, text: &str) {
        if self.notes() {
            self.push(json!({"t": t, "ev": "adversary", "text": text}));
        }
    }

    pub(crate) fn event(&mut self, t: Time, ev: &str, detail: serde_json::Value) {
        if self.notes() {
            self.push(json!({"t": t, "ev": ev, "detail": detail}));
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for l in &self.lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    }
}
