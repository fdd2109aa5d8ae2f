//! Simulated trusted components.
//!
//! A [`TrustedComponent`] is the only source of certificates in the system.
//! Replica code holds it as an opaque handle: key material and counter state
//! are private to this module and reachable only through the operations below.
//! The component supports three abstractions:
//!
//! * USIG-style monotonic counters (`usig_*`), used for equivocation
//!   detection through gapless timelines;
//! * TrInX-style per-phase context counters (`trinx_*`), used for
//!   equivocation prevention;
//! * an A2M-style attested append-only log (`a2m_*`).
//!
//! Certificates are either Ed25519 signatures (verifiable by anyone holding
//! the [`KeyRegistry`]) or HMACs under a system-wide key that only trusted
//! components hold, so HMAC verification costs one access to the verifier's
//! own component.

mod cert;
mod registry;

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use ed25519_dalek::SigningKey;
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{derive_seed, seeded_rng, Digest, Encoder};
use crate::ids::{ReplicaId, Seq, View};

pub use cert::{LogAttestation, SkipAttestation, UniqueIdentifier};
pub use registry::{
    usig_verify_ui, verify_log, verify_skip, Deployment, KeyRegistry, VerifyContext,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TcError {
    #[error("trusted component unavailable")]
    TcUnavailable,
    #[error("certificate from a stale or unknown component epoch")]
    StaleEpoch,
    #[error("request exceeds the watermark window")]
    WindowExceeded,
    #[error("context {0:?} already certified or passed")]
    EquivocationRefused(ContextId),
    #[error("operation not permitted in this mode: {0}")]
    ModeViolation(&'static str),
    #[error("restore refused: {0}")]
    RestoreRefused(&'static str),
    #[error("unknown counter")]
    UnknownCounter,
    #[error("position {0} truncated")]
    Truncated(u64),
    #[error("position {0} not assigned")]
    NotFound(u64),
    #[error("invalid administrative token")]
    BadAdminToken,
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// Certificate primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum CertMode {
    Hmac,
    Sig,
}

/// How counter identities come into existence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CounterPolicy {
    /// Counter identities are derived from (replica, purpose) and known to all.
    Strict,
    /// Counters are created on demand with component-chosen identities.
    Vulnerable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TcIdentity {
    pub replica: ReplicaId,
    pub epoch: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CounterId(pub [u8; 16]);

impl CounterId {
    /// The well-known identity of `replica`'s counter for `purpose`.
    pub fn derive(replica: ReplicaId, purpose: &str) -> CounterId {
        let mut e = Encoder::new("counter-id");
        e.u32(replica.0).bytes(purpose.as_bytes());
        let d = e.finish();
        let mut id = [0u8; 16];
        id.copy_from_slice(&d.0[..16]);
        CounterId(id)
    }
}

impl std::fmt::Debug for CounterId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "q:{}", hex::encode(&self.0[..3]))
    }
}

/// Purpose tag of the single timeline counter used in detection mode.
pub const TIMELINE: &str = "timeline";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prepare,
    Commit,
    Checkpoint,
    ViewChange,
    NewView,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Prepare,
        Phase::Commit,
        Phase::Checkpoint,
        Phase::ViewChange,
        Phase::NewView,
    ];

    fn code(self) -> u8 {
        self as u8
    }
}

/// A protocol context that admits exactly one certified statement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextId {
    pub phase: Phase,
    pub view: View,
    pub seq: Seq,
}

/// Attested position of one per-phase counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseMark {
    pub phase: Phase,
    pub view: View,
    pub seq: Seq,
}

/// Credential the deployment administrator uses for snapshots.
#[derive(Clone, PartialEq, Eq)]
pub struct AdminToken([u8; 32]);

/// Sealed component state produced by [`TrustedComponent::tc_snapshot`].
/// Restorable exactly once, into a component that never certified anything.
pub struct SnapshotBlob {
    sealed: Option<Sealed>,
}

impl SnapshotBlob {
    pub fn identity(&self) -> Option<TcIdentity> {
        self.sealed.as_ref().map(|s| s.identity)
    }

    pub fn is_consumed(&self) -> bool {
        self.sealed.is_none()
    }
}

struct Sealed {
    identity: TcIdentity,
    keys: KeyMaterial,
    state: CounterState,
}

#[derive(Clone)]
pub(crate) struct KeyMaterial {
    signing: SigningKey,
    shared: [u8; 32],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Counter {
    last: u64,
    low: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct AttestedLogState {
    low: u64,
    next: u64,
    entries: BTreeMap<u64, Digest>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct CounterState {
    counters: BTreeMap<CounterId, Counter>,
    phases: BTreeMap<Phase, (View, Seq)>,
    /// Certificates issued per phase; the UI value of context certificates.
    phase_issued: BTreeMap<Phase, u64>,
    log: AttestedLogState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Status {
    Alive,
    Crashed,
    /// Quiesced for a snapshot; refuses all further work.
    Retired,
}

/// One certificate issued by a component; recorded only when auditing is on.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IssuedRecord {
    pub tc: TcIdentity,
    pub counter: CounterId,
    pub value: u64,
    pub context: Option<ContextId>,
    pub msg_hash: Digest,
}

/// Configuration shared by all components of a deployment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TcConfig {
    pub mode: CertMode,
    pub policy: CounterPolicy,
    pub window: u64,
    pub audit: bool,
}

impl Default for TcConfig {
    fn default() -> Self {
        TcConfig {
            mode: CertMode::Sig,
            policy: CounterPolicy::Strict,
            window: 1 << 20,
            audit: false,
        }
    }
}

#[derive(Clone)]
pub struct TrustedComponent {
    identity: TcIdentity,
    config: TcConfig,
    status: Status,
    keys: KeyMaterial,
    state: CounterState,
    /// Counter announced at deployment (vulnerable policy only).
    base_counter: Option<CounterId>,
    issued: u64,
    accesses: u64,
    rng: ChaCha20Rng,
    audit: Vec<IssuedRecord>,
}

impl Hash for TrustedComponent {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.identity.hash(h);
        self.status.hash(h);
        self.state.hash(h);
        self.issued.hash(h);
    }
}

impl std::fmt::Debug for TrustedComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrustedComponent")
            .field("identity", &self.identity)
            .field("status", &self.status)
            .field("issued", &self.issued)
            .finish_non_exhaustive()
    }
}

impl TrustedComponent {
    pub(crate) fn deploy(
        replica: ReplicaId,
        config: TcConfig,
        keys: KeyMaterial,
        seed: u64,
    ) -> TrustedComponent {
        let mut tc = TrustedComponent {
            identity: TcIdentity { replica, epoch: 0 },
            config,
            status: Status::Alive,
            keys,
            state: CounterState::default(),
            base_counter: None,
            issued: 0,
            accesses: 0,
            rng: seeded_rng(seed, "tc-rng", replica.0 as u64),
            audit: Vec::new(),
        };
        tc.state.log.low = 1;
        tc.state.log.next = 1;
        if config.policy == CounterPolicy::Vulnerable {
            let q = tc.fresh_counter();
            tc.base_counter = Some(q);
        }
        tc
    }

    pub fn identity(&self) -> TcIdentity {
        self.identity
    }

    pub fn mode(&self) -> CertMode {
        self.config.mode
    }

    pub fn policy(&self) -> CounterPolicy {
        self.config.policy
    }

    pub fn is_available(&self) -> bool {
        self.status == Status::Alive
    }

    /// Number of calls into the component so far (creation, verification, skip, ...).
    pub fn access_tally(&self) -> u64 {
        self.accesses
    }

    pub fn issued_count(&self) -> u64 {
        self.issued
    }

    /// Certificates issued so far; empty unless auditing is enabled.
    pub fn issued_log(&self) -> &[IssuedRecord] {
        &self.audit
    }

    fn check_alive(&self) -> Result<(), TcError> {
        match self.status {
            Status::Alive => Ok(()),
            _ => Err(TcError::TcUnavailable),
        }
    }

    fn fresh_counter(&mut self) -> CounterId {
        let mut id = [0u8; 16];
        self.rng.fill_bytes(&mut id);
        let q = CounterId(id);
        self.state.counters.insert(q, Counter { last: 0, low: 0 });
        q
    }

    /// The counter this component's replica certifies its timeline with.
    /// Strict policy: the well-known derived identity. Vulnerable policy: the
    /// counter created and announced at deployment.
    pub fn timeline_counter(&mut self) -> Result<CounterId, TcError> {
        self.check_alive()?;
        match self.config.policy {
            CounterPolicy::Strict => {
                let q = CounterId::derive(self.identity.replica, TIMELINE);
                self.state
                    .counters
                    .entry(q)
                    .or_insert(Counter { last: 0, low: 0 });
                Ok(q)
            }
            CounterPolicy::Vulnerable => self.base_counter.ok_or(TcError::UnknownCounter),
        }
    }

    /// Last value issued or skipped on `counter`.
    pub fn counter_value(&self, counter: &CounterId) -> Option<u64> {
        self.state.counters.get(counter).map(|c| c.last)
    }

    /// Creates a new counter with a component-chosen identity. Only the
    /// vulnerable policy offers this; nothing forces the replica to announce it.
    pub fn flexi_create_counter(&mut self) -> Result<CounterId, TcError> {
        self.check_alive()?;
        if self.config.policy != CounterPolicy::Vulnerable {
            return Err(TcError::ModeViolation(
                "counter creation requires the vulnerable policy",
            ));
        }
        self.accesses += 1;
        Ok(self.fresh_counter())
    }

    /// Binds `msg_hash` to the next value of `counter`.
    pub fn usig_create_ui(
        &mut self,
        counter: &CounterId,
        msg_hash: Digest,
    ) -> Result<UniqueIdentifier, TcError> {
        self.check_alive()?;
        let c = self
            .state
            .counters
            .get_mut(counter)
            .ok_or(TcError::UnknownCounter)?;
        self.accesses += 1;
        c.last += 1;
        let value = c.last;
        Ok(self.issue(*counter, value, None, Vec::new(), msg_hash))
    }

    /// Voids the next `count` values of `counter`.
    pub fn usig_skip(
        &mut self,
        counter: &CounterId,
        count: u64,
    ) -> Result<SkipAttestation, TcError> {
        self.check_alive()?;
        if count == 0 {
            return Err(TcError::InvalidArgument("skip count must be positive"));
        }
        let window = self.config.window;
        let c = self
            .state
            .counters
            .get_mut(counter)
            .ok_or(TcError::UnknownCounter)?;
        if c.last + count > c.low + window {
            return Err(TcError::WindowExceeded);
        }
        self.accesses += 1;
        let first = c.last + 1;
        c.last += count;
        let last = c.last;
        Ok(self.attest_skip(*counter, first, last))
    }

    /// Slides the skip window of `counter` so it starts at `new_low`.
    pub fn usig_advance_window(
        &mut self,
        counter: &CounterId,
        new_low: u64,
    ) -> Result<(), TcError> {
        self.check_alive()?;
        let c = self
            .state
            .counters
            .get_mut(counter)
            .ok_or(TcError::UnknownCounter)?;
        if new_low > c.last {
            return Err(TcError::InvalidArgument(
                "window may only slide over used values",
            ));
        }
        c.low = c.low.max(new_low);
        Ok(())
    }

    fn phase_counter(&self, phase: Phase) -> (View, Seq) {
        self.state.phases.get(&phase).copied().unwrap_or((0, 0))
    }

    /// Attested positions of every per-phase counter.
    pub fn trinx_marks(&self) -> Vec<PhaseMark> {
        Phase::ALL
            .iter()
            .map(|&p| {
                let (view, seq) = self.phase_counter(p);
                PhaseMark {
                    phase: p,
                    view,
                    seq,
                }
            })
            .collect()
    }

    fn trinx_admissible(&self, ctx: &ContextId) -> bool {
        let (lv, ls) = self.phase_counter(ctx.phase);
        (ctx.view == lv && ctx.seq == ls + 1) || ctx.view > lv
    }

    /// Certifies `msg_hash` for the context `ctx`. Within a view the phase
    /// counter must advance by exactly one; moving to a higher view is always
    /// allowed. Any other request is refused, which is what makes conflicting
    /// certified statements for one context impossible.
    pub fn trinx_certify(
        &mut self,
        ctx: ContextId,
        msg_hash: Digest,
    ) -> Result<UniqueIdentifier, TcError> {
        self.check_alive()?;
        self.accesses += 1;
        if !self.trinx_admissible(&ctx) {
            return Err(TcError::EquivocationRefused(ctx));
        }
        let marks = if ctx.phase == Phase::ViewChange {
            self.trinx_marks()
        } else {
            Vec::new()
        };
        self.state.phases.insert(ctx.phase, (ctx.view, ctx.seq));
        let value = self.state.phase_issued.entry(ctx.phase).or_insert(0);
        *value += 1;
        let value = *value;
        let counter = CounterId::derive(self.identity.replica, phase_purpose(ctx.phase));
        Ok(self.issue(counter, value, Some(ctx), marks, msg_hash))
    }

    /// Voids every context of `phase` up to and including `(view, seq)`. The
    /// attestation covers the voided seqs of `view`.
    pub fn trinx_skip(
        &mut self,
        phase: Phase,
        view: View,
        seq: Seq,
    ) -> Result<SkipAttestation, TcError> {
        self.check_alive()?;
        let (lv, ls) = self.phase_counter(phase);
        if (view, seq) <= (lv, ls) {
            return Err(TcError::InvalidArgument(
                "skip target must lie ahead of the counter",
            ));
        }
        if view == lv && seq - ls > self.config.window {
            return Err(TcError::WindowExceeded);
        }
        self.accesses += 1;
        self.state.phases.insert(phase, (view, seq));
        let counter = CounterId::derive(self.identity.replica, phase_purpose(phase));
        let first = if view == lv { ls + 1 } else { 1 };
        Ok(self.attest_skip(counter, first, seq))
    }

    /// Appends `msg_hash` to the attested log at the next free position.
    pub fn a2m_append(&mut self, msg_hash: Digest) -> Result<(u64, LogAttestation), TcError> {
        self.check_alive()?;
        let log = &mut self.state.log;
        if log.next >= log.low + self.config.window {
            return Err(TcError::WindowExceeded);
        }
        self.accesses += 1;
        let pos = log.next;
        log.next += 1;
        log.entries.insert(pos, msg_hash);
        self.issued += 1;
        Ok((pos, self.attest_log(pos, msg_hash)))
    }

    /// Returns the attestation for `position`, or `Truncated` below the low watermark.
    pub fn a2m_lookup(&mut self, position: u64) -> Result<LogAttestation, TcError> {
        self.check_alive()?;
        self.accesses += 1;
        let log = &self.state.log;
        if position < log.low {
            return Err(TcError::Truncated(position));
        }
        let hash = *log
            .entries
            .get(&position)
            .ok_or(TcError::NotFound(position))?;
        Ok(self.attest_log(position, hash))
    }

    /// Discards all positions below `new_low`. Positions are never reassigned.
    pub fn a2m_truncate(&mut self, new_low: u64) -> Result<(), TcError> {
        self.check_alive()?;
        let log = &mut self.state.log;
        if new_low <= log.low {
            return Err(TcError::InvalidArgument("truncation point must advance"));
        }
        if new_low > log.next {
            return Err(TcError::InvalidArgument(
                "cannot truncate unassigned positions",
            ));
        }
        self.accesses += 1;
        log.low = new_low;
        log.entries = log.entries.split_off(&new_low);
        Ok(())
    }

    /// Quiesces the component and seals its state for a planned restart.
    /// The component refuses all further calls afterwards.
    pub fn tc_snapshot(&mut self, admin: &AdminToken) -> Result<SnapshotBlob, TcError> {
        self.check_alive()?;
        if *admin != admin_token_for(self.keys.shared) {
            return Err(TcError::BadAdminToken);
        }
        self.status = Status::Retired;
        Ok(SnapshotBlob {
            sealed: Some(Sealed {
                identity: self.identity,
                keys: self.keys.clone(),
                state: self.state.clone(),
            }),
        })
    }

    /// Reinstalls a sealed state into a fresh component. The component then
    /// continues the snapshot's timeline under the snapshot's identity.
    pub fn tc_restore(&mut self, blob: &mut SnapshotBlob) -> Result<(), TcError> {
        if self.status != Status::Alive || self.issued != 0 {
            return Err(TcError::RestoreRefused("target component is not fresh"));
        }
        let sealed = blob
            .sealed
            .take()
            .ok_or(TcError::RestoreRefused("snapshot already consumed"))?;
        if sealed.identity.replica != self.identity.replica {
            blob.sealed = Some(sealed);
            return Err(TcError::RestoreRefused(
                "snapshot belongs to another replica",
            ));
        }
        self.identity = sealed.identity;
        self.keys = sealed.keys;
        self.state = sealed.state;
        self.accesses += 1;
        Ok(())
    }

    /// Stops the component. A crashed component answers every call with
    /// `TcUnavailable`.
    pub fn crash(&mut self) {
        self.status = Status::Crashed;
    }

    /// Starts a fresh instance on the same host: new epoch, freshly generated
    /// keys unknown to the deployment, empty counters.
    pub fn restart(&mut self) {
        let epoch = self.identity.epoch + 1;
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        let mut shared = [0u8; 32];
        self.rng.fill_bytes(&mut shared);
        self.identity = TcIdentity {
            replica: self.identity.replica,
            epoch,
        };
        self.keys = KeyMaterial {
            signing: SigningKey::from_bytes(&seed),
            shared,
        };
        self.state = CounterState::default();
        self.state.log.low = 1;
        self.state.log.next = 1;
        self.base_counter = None;
        self.issued = 0;
        self.status = Status::Alive;
    }

    fn issue(
        &mut self,
        counter: CounterId,
        value: u64,
        context: Option<ContextId>,
        marks: Vec<PhaseMark>,
        msg_hash: Digest,
    ) -> UniqueIdentifier {
        self.issued += 1;
        if self.config.audit {
            self.audit.push(IssuedRecord {
                tc: self.identity,
                counter,
                value,
                context,
                msg_hash,
            });
        }
        let mut ui = UniqueIdentifier {
            tc: self.identity,
            counter,
            value,
            context,
            marks,
            msg_hash,
            cert: Vec::new(),
            mode: self.config.mode,
        };
        ui.cert = cert::produce(&self.keys, self.config.mode, &ui.payload());
        ui
    }

    fn attest_skip(&mut self, counter: CounterId, first: u64, last: u64) -> SkipAttestation {
        let mut a = SkipAttestation {
            tc: self.identity,
            counter,
            first,
            last,
            cert: Vec::new(),
            mode: self.config.mode,
        };
        a.cert = cert::produce(&self.keys, self.config.mode, &a.payload());
        a
    }

    fn attest_log(&self, position: u64, msg_hash: Digest) -> LogAttestation {
        let mut a = LogAttestation {
            tc: self.identity,
            position,
            msg_hash,
            cert: Vec::new(),
            mode: self.config.mode,
        };
        a.cert = cert::produce(&self.keys, self.config.mode, &a.payload());
        a
    }

    /// HMAC check inside the verifier's own component.
    pub(crate) fn hmac_check(&mut self, payload: &[u8], tag: &[u8]) -> Result<bool, TcError> {
        self.check_alive()?;
        self.accesses += 1;
        Ok(cert::hmac_valid(&self.keys.shared, payload, tag))
    }
}

pub(crate) fn phase_purpose(phase: Phase) -> &'static str {
    match phase {
        Phase::Prepare => "phase/prepare",
        Phase::Commit => "phase/commit",
        Phase::Checkpoint => "phase/checkpoint",
        Phase::ViewChange => "phase/view-change",
        Phase::NewView => "phase/new-view",
    }
}

pub(crate) fn admin_token_for(shared: [u8; 32]) -> AdminToken {
    let mut e = Encoder::new("admin");
    e.bytes(&shared);
    AdminToken(e.finish().0)
}

pub(crate) fn deployment_keys(seed: u64, replica: ReplicaId, shared: [u8; 32]) -> KeyMaterial {
    KeyMaterial {
        signing: SigningKey::from_bytes(&derive_seed(seed, "tc-key", replica.0 as u64)),
        shared,
    }
}

#[cfg(test)]
mod tests;
