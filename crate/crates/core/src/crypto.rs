//! Digests, canonical encoding and client authentication.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::ids::ClientId;

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 32 bytes"))?;
        Ok(Digest(arr))
    }
}

/// Canonical, length-prefixed byte encoder. Fields are written in a fixed
/// order; variable-length fields carry a u32 little-endian length prefix.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(tag: &str) -> Self {
        let mut e = Encoder {
            buf: Vec::with_capacity(128),
        };
        e.bytes(tag.as_bytes());
        e
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.buf.extend_from_slice(&d.0);
        self
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn finish(&self) -> Digest {
        Digest::of(&self.buf)
    }
}

/// Deterministically derives 32 bytes of key seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut enc = Encoder::new("seed");
    enc.u64(master).bytes(label.as_bytes()).u64(index);
    enc.finish().0
}

pub fn seeded_rng(master: u64, label: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(master, label, index))
}

/// Client signing key. Clients are outside the trusted computing base; their
/// keys are ordinary Ed25519 keys.
#[derive(Clone)]
pub struct ClientKey {
    key: SigningKey,
}

impl ClientKey {
    pub fn derive(master: u64, client: ClientId) -> Self {
        ClientKey {
            key: SigningKey::from_bytes(&derive_seed(master, "client", client.0 as u64)),
        }
    }

    pub fn sign(&self, payload: &Digest) -> [u8; 64] {
        self.key.sign(&payload.0).to_bytes()
    }

    pub fn verifying(&self) -> VerifyingKey {
        self.key.verifying_key()
    }
}

/// Public keys of all clients, known to every replica.
#[derive(Clone, Debug, Default)]
pub struct ClientDirectory {
    keys: Vec<VerifyingKey>,
}

impl ClientDirectory {
    pub fn derive(master: u64, clients: u32) -> Self {
        ClientDirectory {
            keys: (0..clients)
                .map(|c| ClientKey::derive(master, ClientId(c)).verifying())
                .collect(),
        }
    }

    pub fn verify(&self, client: ClientId, payload: &Digest, sig: &[u8; 64]) -> bool {
        match self.keys.get(client.0 as usize) {
            Some(k) => k.verify(&payload.0, &Signature::from_bytes(sig)).is_ok(),
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
