use ed25519_dalek::{Signature, Signer, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::{CertMode, ContextId, CounterId, KeyMaterial, PhaseMark, TcIdentity};
use crate::crypto::{Digest, Encoder};

type HmacSha256 = Hmac<Sha256>;

/// A certificate binding (component, counter, value) to a message hash.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UniqueIdentifier {
    pub tc: TcIdentity,
    pub counter: CounterId,
    pub value: u64,
    /// Present for context-bound (prevention mode) certificates.
    pub context: Option<ContextId>,
    /// Phase counter positions at certification time; view-change certificates only.
    pub marks: Vec<PhaseMark>,
    pub msg_hash: Digest,
    #[serde(with = "hex_bytes")]
    pub cert: Vec<u8>,
    pub mode: CertMode,
}

impl UniqueIdentifier {
    pub(crate) fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new("ui");
        e.u32(self.tc.epoch)
            .u32(self.tc.replica.0)
            .bytes(&self.counter.0)
            .u64(self.value);
        match &self.context {
            None => {
                e.u8(0);
            }
            Some(c) => {
                e.u8(1).u8(c.phase.code()).u64(c.view).u64(c.seq);
            }
        }
        e.u32(self.marks.len() as u32);
        for m in &self.marks {
            e.u8(m.phase.code()).u64(m.view).u64(m.seq);
        }
        e.digest(&self.msg_hash);
        e.into_bytes()
    }
}

/// Proof that the values `first..=last` of a counter were voided.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipAttestation {
    pub tc: TcIdentity,
    pub counter: CounterId,
    pub first: u64,
    pub last: u64,
    #[serde(with = "hex_bytes")]
    pub cert: Vec<u8>,
    pub mode: CertMode,
}

impl SkipAttestation {
    pub(crate) fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new("skip");
        e.u32(self.tc.epoch)
            .u32(self.tc.replica.0)
            .bytes(&self.counter.0)
            .u64(self.first)
            .u64(self.last);
        e.into_bytes()
    }
}

/// Attestation of one attested-log position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogAttestation {
    pub tc: TcIdentity,
    pub position: u64,
    pub msg_hash: Digest,
    #[serde(with = "hex_bytes")]
    pub cert: Vec<u8>,
    pub mode: CertMode,
}

impl LogAttestation {
    pub(crate) fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new("a2m");
        e.u32(self.tc.epoch)
            .u32(self.tc.replica.0)
            .u64(self.position)
            .digest(&self.msg_hash);
        e.into_bytes()
    }
}

pub(crate) fn produce(keys: &KeyMaterial, mode: CertMode, payload: &[u8]) -> Vec<u8> {
    match mode {
        CertMode::Sig => keys.signing.sign(payload).to_bytes().to_vec(),
        CertMode::Hmac => {
            let mut mac =
                HmacSha256::new_from_slice(&keys.shared).expect("hmac accepts any key length");
            mac.update(payload);
            mac.finalize().into_bytes().to_vec()
        }
    }
}

pub(crate) fn hmac_valid(shared: &[u8; 32], payload: &[u8], tag: &[u8]) -> bool {
    let mut mac = HmacSha256::new_from_slice(shared).expect("hmac accepts any key length");
    mac.update(payload);
    mac.verify_slice(tag).is_ok()
}

pub(crate) fn signature_valid(key: &VerifyingKey, payload: &[u8], cert: &[u8]) -> bool {
    let Ok(bytes) = <[u8; 64]>::try_from(cert) else {
        return false;
    };
    key.verify(payload, &Signature::from_bytes(&bytes)).is_ok()
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
