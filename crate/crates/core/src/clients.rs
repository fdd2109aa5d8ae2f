//! Closed-loop clients: one outstanding request each, sent to every replica,
//! completed once enough matching replies arrived.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{seeded_rng, ClientKey, Digest};
use crate::ids::{ClientId, ReplicaId, Seq, Time};
use crate::protocol::{KvOp, Message, Reply, Request};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReplyPolicy {
    /// f+1 replies with the same result.
    #[serde(rename = "f+1")]
    FPlusOne,
    /// n−f replies with the same result and the same seq.
    #[serde(rename = "n-f")]
    NMinusF,
}

impl ReplyPolicy {
    pub fn threshold(self, n: usize, f: usize) -> usize {
        match self {
            ReplyPolicy::FPlusOne => f + 1,
            ReplyPolicy::NMinusF => n - f,
        }
    }
}

impl std::str::FromStr for ReplyPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f+1" | "f1" => Ok(ReplyPolicy::FPlusOne),
            "n-f" | "n−f" | "nf" => Ok(ReplyPolicy::NMinusF),
            other => Err(format!("unknown reply policy `{other}` (expected f+1 or n-f)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub client: ClientId,
    pub seq: u64,
    pub submit_t: Time,
    pub complete_t: Time,
}

#[derive(Clone, Debug)]
struct InFlight {
    request: Request,
    submitted: Time,
    replies: BTreeMap<ReplicaId, (Digest, Seq)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientAction {
    Send { to: ReplicaId, msg: Message },
    Retransmit { at: Time, client_seq: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplyOutcome {
    Completed(LatencyRecord),
    Waiting,
}

pub struct Client {
    id: ClientId,
    key: ClientKey,
    n: usize,
    f: usize,
    policy: ReplyPolicy,
    tx_size: usize,
    retransmit_after: Time,
    next_seq: u64,
    in_flight: Option<InFlight>,
    rng: ChaCha20Rng,
    latencies: Vec<LatencyRecord>,
    retransmissions: u64,
}

impl Client {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: ClientId,
        seed: u64,
        n: usize,
        f: usize,
        policy: ReplyPolicy,
        tx_size: usize,
        retransmit_after: Time,
    ) -> Client {
        Client {
            id,
            key: ClientKey::derive(seed, id),
            n,
            f,
            policy,
            tx_size,
            retransmit_after,
            next_seq: 1,
            in_flight: None,
            rng: seeded_rng(seed, "workload", id.0 as u64),
            latencies: Vec::new(),
            retransmissions: 0,
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn latencies(&self) -> &[LatencyRecord] {
        &self.latencies
    }

    pub fn completed(&self) -> usize {
        self.latencies.len()
    }

    pub fn retransmissions(&self) -> u64 {
        self.retransmissions
    }

    /// Submission time of the outstanding request, if any.
    pub fn in_flight_since(&self) -> Option<Time> {
        self.in_flight.as_ref().map(|i| i.submitted)
    }

    pub fn in_flight_request(&self) -> Option<&Request> {
        self.in_flight.as_ref().map(|i| &i.request)
    }

    fn next_op(&mut self) -> KvOp {
        let key = self.rng.gen_range(0..64);
        match self.rng.gen_range(0..3) {
            0 => KvOp::Put { key, value: self.rng.gen() },
            1 => KvOp::Get { key },
            _ => KvOp::Add { key, delta: self.rng.gen_range(1..100) },
        }
    }

    /// Issues the next request to all replicas. Does nothing while a request
    /// is outstanding.
    pub fn submit(&mut self, now: Time) -> Vec<ClientAction> {
        if self.in_flight.is_some() {
            return Vec::new();
        }
        let client_seq = self.next_seq;
        self.next_seq += 1;
        let payload = self.next_op().encode(self.tx_size);
        let auth = self.key.sign(&Request::signing_digest(self.id, client_seq, &payload)).to_vec();
        let request = Request { client: self.id, client_seq, payload, auth };
        self.in_flight = Some(InFlight { request, submitted: now, replies: BTreeMap::new() });
        self.broadcast(now)
    }

    fn broadcast(&self, now: Time) -> Vec<ClientAction> {
        let Some(f) = &self.in_flight else { return Vec::new() };
        let mut out: Vec<ClientAction> = (0..self.n as u32)
            .map(|r| ClientAction::Send { to: ReplicaId(r), msg: Message::Request(f.request.clone()) })
            .collect();
        if self.retransmit_after > 0 {
            out.push(ClientAction::Retransmit {
                at: now + self.retransmit_after,
                client_seq: f.request.client_seq,
            });
        }
        out
    }

    pub fn on_retransmit(&mut self, now: Time, client_seq: u64) -> Vec<ClientAction> {
        match &self.in_flight {
            Some(f) if f.request.client_seq == client_seq => {
                self.retransmissions += 1;
                self.broadcast(now)
            }
            _ => Vec::new(),
        }
    }

    pub fn on_reply(&mut self, now: Time, reply: &Reply) -> ReplyOutcome {
        let Some(f) = &mut self.in_flight else { return ReplyOutcome::Waiting };
        if reply.client != self.id || reply.client_seq != f.request.client_seq || reply.replica.0 as usize >= self.n {
            return ReplyOutcome::Waiting;
        }
        f.replies.insert(reply.replica, (reply.result, reply.seq));
        let need = self.policy.threshold(self.n, self.f);
        let matching = f
            .replies
            .values()
            .filter(|(d, s)| match self.policy {
                ReplyPolicy::FPlusOne => *d == reply.result,
                ReplyPolicy::NMinusF => *d == reply.result && *s == reply.seq,
            })
            .count();
        if matching < need {
            return ReplyOutcome::Waiting;
        }
        let rec = LatencyRecord { client: self.id, seq: f.request.client_seq, submit_t: f.submitted, complete_t: now };
        self.in_flight = None;
        self.latencies.push(rec);
        ReplyOutcome::Completed(rec)
    }
}

pub const LATENCY_HEADER: &str = "client,seq,submit_t,complete_t";

pub fn write_latency_csv<W: Write>(mut w: W, records: &[LatencyRecord]) -> io::Result<()> {
    writeln!(w, "{LATENCY_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.client.0, r.seq, r.submit_t, r.complete_t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reply(c: &Client, replica: u32, result: Digest, seq: Seq) -> Reply {
        let req = c.in_flight_request().unwrap();
        Reply { client: c.id, client_seq: req.client_seq, seq, replica: ReplicaId(replica), result }
    }

    fn client(policy: ReplyPolicy) -> Client {
        Client::new(ClientId(0), 1, 3, 1, policy, 64, 500)
    }

    #[test]
    fn submit_goes_to_all_replicas() {
        let mut c = client(ReplyPolicy::FPlusOne);
        let acts = c.submit(10);
        let sends = acts.iter().filter(|a| matches!(a, ClientAction::Send { .. })).count();
        assert_eq!(sends, 3);
        assert!(acts.contains(&ClientAction::Retransmit { at: 510, client_seq: 1 }));
        // closed loop
        assert!(c.submit(11).is_empty());
        let req = c.in_flight_request().unwrap();
        assert_eq!(req.payload.len(), 64);
    }

    #[test]
    fn two_matching_replies_complete_at_f1() {
        let mut c = client(ReplyPolicy::FPlusOne);
        c.submit(0);
        let d = Digest::of(b"r");
        assert_eq!(c.on_reply(5, &reply(&c, 0, d, 1)), ReplyOutcome::Waiting);
        // the same replica twice does not count
        assert_eq!(c.on_reply(6, &reply(&c, 0, d, 1)), ReplyOutcome::Waiting);
        let done = c.on_reply(7, &reply(&c, 2, d, 1));
        assert_eq!(
            done,
            ReplyOutcome::Completed(LatencyRecord { client: ClientId(0), seq: 1, submit_t: 0, complete_t: 7 })
        );
        assert_eq!(c.completed(), 1);
        assert!(c.in_flight_since().is_none());
    }

    #[test]
    fn conflicting_results_keep_waiting() {
        let mut c = client(ReplyPolicy::FPlusOne);
        c.submit(0);
        assert_eq!(c.on_reply(1, &reply(&c, 0, Digest::of(b"a"), 1)), ReplyOutcome::Waiting);
        assert_eq!(c.on_reply(2, &reply(&c, 1, Digest::of(b"b"), 1)), ReplyOutcome::Waiting);
    }

    #[test]
    fn n_minus_f_needs_equal_seq() {
        let mut c = client(ReplyPolicy::NMinusF);
        c.submit(0);
        let d = Digest::of(b"r");
        assert_eq!(c.on_reply(1, &reply(&c, 0, d, 1)), ReplyOutcome::Waiting);
        assert_eq!(c.on_reply(2, &reply(&c, 1, d, 2)), ReplyOutcome::Waiting);
        assert!(matches!(c.on_reply(3, &reply(&c, 2, d, 1)), ReplyOutcome::Completed(_)));
    }

    #[test]
    fn single_reply_never_completes() {
        let mut c = client(ReplyPolicy::NMinusF);
        c.submit(0);
        for t in 0..10 {
            assert_eq!(c.on_reply(t, &reply(&c, 1, Digest::of(b"r"), 1)), ReplyOutcome::Waiting);
        }
    }

    #[test]
    fn retransmits_only_outstanding() {
        let mut c = client(ReplyPolicy::FPlusOne);
        c.submit(0);
        assert_eq!(c.on_retransmit(500, 1).len(), 4);
        assert!(c.on_retransmit(500, 7).is_empty());
        assert_eq!(c.retransmissions(), 1);
    }

    #[test]
    fn latency_csv_layout() {
        let mut out = Vec::new();
        let recs = [LatencyRecord { client: ClientId(3), seq: 2, submit_t: 10, complete_t: 25 }];
        write_latency_csv(&mut out, &recs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "client,seq,submit_t,complete_t\n3,2,10,25\n");
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("f+1".parse::<ReplyPolicy>().unwrap(), ReplyPolicy::FPlusOne);
        assert_eq!("n-f".parse::<ReplyPolicy>().unwrap(), ReplyPolicy::NMinusF);
        assert!("all".parse::<ReplyPolicy>().is_err());
        assert_eq!(ReplyPolicy::NMinusF.threshold(5, 2), 3);
    }
}
