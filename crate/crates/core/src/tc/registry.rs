use std::collections::BTreeMap;
use std::sync::Arc;

use ed25519_dalek::VerifyingKey;

use super::cert::{self, LogAttestation, SkipAttestation, UniqueIdentifier};
use super::{
    admin_token_for, deployment_keys, AdminToken, CertMode, CounterId, TcConfig, TcError,
    TcIdentity, TrustedComponent,
};
use crate::crypto::{derive_seed, Digest};
use crate::ids::ReplicaId;

/// Public verification material distributed at deployment.
#[derive(Clone, Debug, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<TcIdentity, VerifyingKey>,
    /// Counters announced at deployment (vulnerable policy).
    announced: BTreeMap<ReplicaId, CounterId>,
}

impl KeyRegistry {
    pub fn is_registered(&self, tc: &TcIdentity) -> bool {
        self.keys.contains_key(tc)
    }

    pub fn announced_counter(&self, replica: ReplicaId) -> Option<CounterId> {
        self.announced.get(&replica).copied()
    }
}

/// What a verifier brings to a verification: the public registry and, for
/// HMAC certificates, its own trusted component.
pub struct VerifyContext<'a> {
    pub registry: &'a KeyRegistry,
    pub local: Option<&'a mut TrustedComponent>,
}

impl<'a> VerifyContext<'a> {
    pub fn new(registry: &'a KeyRegistry, local: Option<&'a mut TrustedComponent>) -> Self {
        VerifyContext { registry, local }
    }
}

/// The trusted components of one deployment, their public keys and the
/// administrator credential.
pub struct Deployment {
    pub tcs: Vec<TrustedComponent>,
    pub registry: Arc<KeyRegistry>,
    pub admin: AdminToken,
}

impl Deployment {
    pub fn new(n: usize, config: TcConfig, seed: u64) -> Deployment {
        let shared = derive_seed(seed, "tc-shared", 0);
        let mut registry = KeyRegistry::default();
        let mut tcs = Vec::with_capacity(n);
        for i in 0..n {
            let replica = ReplicaId(i as u32);
            let keys = deployment_keys(seed, replica, shared);
            let mut tc = TrustedComponent::deploy(replica, config, keys, seed);
            registry
                .keys
                .insert(tc.identity(), tc.keys.signing.verifying_key());
            if let Some(q) = tc.base_counter {
                registry.announced.insert(replica, q);
            }
            if config.policy == super::CounterPolicy::Strict {
                let _ = tc.timeline_counter();
            }
            tcs.push(tc);
        }
        Deployment {
            tcs,
            registry: Arc::new(registry),
            admin: admin_token_for(shared),
        }
    }
}

fn check(
    ctx: &mut VerifyContext<'_>,
    tc: &TcIdentity,
    mode: CertMode,
    payload: &[u8],
    certificate: &[u8],
) -> Result<bool, TcError> {
    let Some(key) = ctx.registry.keys.get(tc) else {
        return Err(TcError::StaleEpoch);
    };
    match mode {
        CertMode::Sig => Ok(cert::signature_valid(key, payload, certificate)),
        CertMode::Hmac => match ctx.local.as_deref_mut() {
            Some(local) => local.hmac_check(payload, certificate),
            None => Err(TcError::TcUnavailable),
        },
    }
}

/// Checks that `ui` certifies `msg_hash`. Signature certificates are checked
/// against the registry without touching any component; HMAC certificates
/// need one access to the verifier's own component.
pub fn usig_verify_ui(
    ui: &UniqueIdentifier,
    msg_hash: &Digest,
    ctx: &mut VerifyContext<'_>,
) -> Result<bool, TcError> {
    if !ctx.registry.is_registered(&ui.tc) {
        return Err(TcError::StaleEpoch);
    }
    if ui.msg_hash != *msg_hash || ui.value == 0 {
        return Ok(false);
    }
    check(ctx, &ui.tc, ui.mode, &ui.payload(), &ui.cert)
}

pub fn verify_skip(att: &SkipAttestation, ctx: &mut VerifyContext<'_>) -> Result<bool, TcError> {
    if att.first == 0 || att.first > att.last {
        return Ok(false);
    }
    check(ctx, &att.tc, att.mode, &att.payload(), &att.cert)
}

pub fn verify_log(att: &LogAttestation, ctx: &mut VerifyContext<'_>) -> Result<bool, TcError> {
    check(ctx, &att.tc, att.mode, &att.payload(), &att.cert)
}
