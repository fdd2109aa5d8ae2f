//! Deterministic key-value service replicated by the protocol.
//!
//! Operation encoding (the rest of the payload is padding up to the
//! configured transaction size):
//!
//! | byte 0 | bytes 1..9 | bytes 9..17 |
//! |--------|------------|-------------|
//! | 0 = put, 1 = get, 2 = add | key (LE u64) | operand (LE u64) |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{Digest, Encoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KvOp {
    Put { key: u64, value: u64 },
    Get { key: u64 },
    Add { key: u64, delta: u64 },
}

impl KvOp {
    pub fn encode(&self, size: usize) -> Vec<u8> {
        let (code, key, operand) = match *self {
            KvOp::Put { key, value } => (0u8, key, value),
            KvOp::Get { key } => (1, key, 0),
            KvOp::Add { key, delta } => (2, key, delta),
        };
        let mut out = Vec::with_capacity(size.max(17));
        out.push(code);
        out.extend_from_slice(&key.to_le_bytes());
        out.extend_from_slice(&operand.to_le_bytes());
        out.resize(size.max(17), 0);
        out
    }

    pub fn decode(payload: &[u8]) -> Option<KvOp> {
        if payload.len() < 17 {
            return None;
        }
        let key = u64::from_le_bytes(payload[1..9].try_into().ok()?);
        let operand = u64::from_le_bytes(payload[9..17].try_into().ok()?);
        match payload[0] {
            0 => Some(KvOp::Put {
                key,
                value: operand,
            }),
            1 => Some(KvOp::Get { key }),
            2 => Some(KvOp::Add {
                key,
                delta: operand,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvService {
    map: BTreeMap<u64, u64>,
    /// Chained digest over every applied operation and its result.
    digest: Digest,
    applied: u64,
}

impl KvService {
    /// Applies one operation and returns the result digest. Undecodable
    /// payloads are applied as no-ops with a fixed result.
    pub fn apply(&mut self, payload: &[u8]) -> Digest {
        let result: Option<u64> = match KvOp::decode(payload) {
            Some(KvOp::Put { key, value }) => self.map.insert(key, value),
            Some(KvOp::Get { key }) => self.map.get(&key).copied(),
            Some(KvOp::Add { key, delta }) => {
                let v = self.map.entry(key).or_insert(0);
                *v = v.wrapping_add(delta);
                Some(*v)
            }
            None => None,
        };
        let mut e = Encoder::new("kv-result");
        e.u64(self.applied);
        match result {
            Some(v) => e.u8(1).u64(v),
            None => e.u8(0),
        };
        let out = e.finish();
        let mut chain = Encoder::new("kv-state");
        chain.digest(&self.digest).digest(&out);
        self.digest = chain.finish();
        self.applied += 1;
        out
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn get(&self, key: u64) -> Option<u64> {
        self.map.get(&key).copied()
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }
}
