//! Scripted faulty behaviour.
//!
//! Faulty replicas run the ordinary replica code; a script sits between
//! them and the network. It sees every message a controlled replica sends,
//! may drop, redirect or replace it, and may use the controlled replicas'
//! own trusted components. It cannot touch anybody else's component.

mod scripts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::{Endpoint, ReplicaId, Time};
use crate::protocol::{Message, Mode, Replica};
use crate::tc::{AdminToken, TrustedComponent};

pub use scripts::{
    CounterIdentity, CrashTcs, EquivocateWithhold, GapForever, NoFaults, SilentRepliers,
};

/// Script id plus free-form parameters, as written in a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySpec {
    pub script: String,
    pub params: BTreeMap<String, Value>,
}

impl AdversarySpec {
    pub fn named(script: &str) -> Self {
        AdversarySpec {
            script: script.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn script_name(&self) -> &str {
        if self.script.is_empty() {
            "none"
        } else {
            &self.script
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("unknown adversary script `{0}`")]
    Unknown(String),
    #[error("bad parameter `{key}`: {reason}")]
    BadParam { key: String, reason: String },
    #[error("{0}")]
    Unsupported(String),
}

/// Typed access to script parameters.
pub struct Params<'a>(&'a BTreeMap<String, Value>);

impl Params<'_> {
    fn bad(key: &str, reason: &str) -> ScriptError {
        ScriptError::BadParam {
            key: key.to_string(),
            reason: reason.to_string(),
        }
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64, ScriptError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Self::bad(key, "expected a non-negative integer")),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, ScriptError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| Self::bad(key, "expected a number")),
        }
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool, ScriptError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| Self::bad(key, "expected a boolean")),
        }
    }

    pub fn replicas(&self, key: &str) -> Result<Option<Vec<ReplicaId>>, ScriptError> {
        let Some(v) = self.0.get(key) else {
            return Ok(None);
        };
        let list = v
            .as_array()
            .ok_or_else(|| Self::bad(key, "expected a list of replica ids"))?;
        list.iter()
            .map(|x| {
                x.as_u64()
                    .map(|r| ReplicaId(r as u32))
                    .ok_or_else(|| Self::bad(key, "expected a list of replica ids"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn check_known(&self, known: &[&str]) -> Result<(), ScriptError> {
        match self.0.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Self::bad(k, "not a parameter of this script")),
            None => Ok(()),
        }
    }
}

/// What a script may know about the deployment it runs in.
#[derive(Clone, Copy, Debug)]
pub struct Setup {
    pub f: usize,
    pub n: usize,
    pub mode: Mode,
}

/// Everything a script can do during one callback.
pub struct AdvCtx<'a> {
    pub now: Time,
    pub setup: Setup,
    controlled: &'a BTreeSet<ReplicaId>,
    replicas: &'a mut [Replica],
    admin: &'a AdminToken,
    pub(crate) out: AdvOutput,
}

/// Effects requested by a script, applied by the simulator afterwards.
#[derive(Default, Debug)]
pub(crate) struct AdvOutput {
    pub sends: Vec<(ReplicaId, Endpoint, Message)>,
    pub wakes: Vec<(Time, u64)>,
    pub narrative: Vec<String>,
    pub recovered: Vec<ReplicaId>,
}

impl<'a> AdvCtx<'a> {
    pub(crate) fn new(
        now: Time,
        setup: Setup,
        controlled: &'a BTreeSet<ReplicaId>,
        replicas: &'a mut [Replica],
        admin: &'a AdminToken,
    ) -> Self {
        AdvCtx {
            now,
            setup,
            controlled,
            replicas,
            admin,
            out: AdvOutput::default(),
        }
    }

    fn check(&self, r: ReplicaId) {
        assert!(
            self.controlled.contains(&r),
            "script touched {r}, which it does not control"
        );
    }

    /// Read-only view of a controlled replica.
    pub fn replica(&self, r: ReplicaId) -> &Replica {
        self.check(r);
        &self.replicas[r.0 as usize]
    }

    /// The trusted component of a controlled replica.
    pub fn tc(&mut self, r: ReplicaId) -> &mut TrustedComponent {
        self.check(r);
        self.replicas[r.0 as usize].tc_mut()
    }

    pub fn admin(&self) -> &AdminToken {
        self.admin
    }

    /// Sends `msg` as controlled replica `from`, bypassing the script itself.
    pub fn send(&mut self, from: ReplicaId, to: Endpoint, msg: Message) {
        self.check(from);
        self.out.sends.push((from, to, msg));
    }

    pub fn send_to(&mut self, from: ReplicaId, to: ReplicaId, msg: Message) {
        self.send(from, Endpoint::Replica(to), msg);
    }

    pub fn wake_at(&mut self, at: Time, tag: u64) {
        self.out.wakes.push((at, tag));
    }

    /// Tells replica `r` its component works again.
    pub fn tc_recovered(&mut self, r: ReplicaId) {
        self.check(r);
        self.out.recovered.push(r);
    }

    pub fn say(&mut self, line: impl Into<String>) {
        self.out.narrative.push(line.into());
    }
}

/// A faulty-behaviour script.
pub trait Adversary: Send + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Replicas whose outgoing traffic and components the script controls.
    fn controlled(&self) -> BTreeSet<ReplicaId>;

    /// Replicas to exclude from correctness verdicts. Defaults to the
    /// controlled set; scripts that only crash components keep their
    /// replicas correct.
    fn byzantine(&self) -> BTreeSet<ReplicaId> {
        self.controlled()
    }

    fn start(&mut self, _ctx: &mut AdvCtx<'_>) {}

    /// Decides what happens to one message a controlled replica sends.
    fn outgoing(
        &mut self,
        ctx: &mut AdvCtx<'_>,
        from: ReplicaId,
        to: Endpoint,
        msg: Message,
    ) -> Vec<(Endpoint, Message)>;

    fn wake(&mut self, _ctx: &mut AdvCtx<'_>, _tag: u64) {}

    fn boxed_clone(&self) -> Box<dyn Adversary>;

    /// Digest of the script's internal state, for state-space exploration.
    fn fingerprint(&self) -> u64;
}

impl Clone for Box<dyn Adversary> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

type Factory = fn(&Params<'_>, Setup) -> Result<Box<dyn Adversary>, ScriptError>;

struct Entry {
    name: &'static str,
    summary: &'static str,
    build: Factory,
}

/// Name → constructor table of every available script.
pub struct AdversaryRegistry {
    entries: Vec<Entry>,
}

impl AdversaryRegistry {
    pub fn empty() -> Self {
        AdversaryRegistry {
            entries: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, summary: &'static str, build: Factory) {
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name,
            summary,
            build,
        });
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|e| (e.name, e.summary)).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn build(&self, spec: &AdversarySpec, setup: Setup) -> Result<Box<dyn Adversary>, ScriptError> {
        let name = spec.script_name();
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ScriptError::Unknown(name.to_string()))?;
        (entry.build)(&Params(&spec.params), setup)
    }
}

impl Default for AdversaryRegistry {
    fn default() -> Self {
        let mut r = AdversaryRegistry::empty();
        r.register("none", "no faults", NoFaults::build);
        r.register(
            "silent_repliers",
            "f replicas commit but never reply; the leader hides its messages from f correct replicas",
            SilentRepliers::build,
        );
        r.register(
            "equivocate_withhold",
            "the leader certifies two conflicting statements and shows each to one half of the followers",
            EquivocateWithhold::build,
        );
        r.register(
            "counter_identity",
            "the leader opens a second counter and replays its timeline on it with a conflicting proposal",
            CounterIdentity::build,
        );
        r.register(
            "crash_tcs",
            "stop the trusted components of k replicas, optionally restoring one from a snapshot",
            CrashTcs::build,
        );
        r.register(
            "gap_forever",
            "the leader never sends one of its timeline values",
            GapForever::build,
        );
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> Setup {
        Setup {
            f: 1,
            n: 3,
            mode: Mode::Detection,
        }
    }

    #[test]
    fn registry_knows_all_scripts() {
        let reg = AdversaryRegistry::default();
        assert_eq!(
            reg.names(),
            [
                "none",
                "silent_repliers",
                "equivocate_withhold",
                "counter_identity",
                "crash_tcs",
                "gap_forever"
            ]
        );
        for name in reg.names() {
            let a = reg.build(&AdversarySpec::named(name), setup()).unwrap();
            assert_eq!(a.name(), name);
        }
    }

    #[test]
    fn unknown_script_and_param_are_rejected() {
        let reg = AdversaryRegistry::default();
        assert_eq!(
            reg.build(&AdversarySpec::named("nope"), setup()).unwrap_err(),
            ScriptError::Unknown("nope".into())
        );
        let spec = AdversarySpec::named("gap_forever").with("colour", 3);
        assert!(matches!(
            reg.build(&spec, setup()),
            Err(ScriptError::BadParam { .. })
        ));
    }

    #[test]
    fn empty_script_means_none() {
        let reg = AdversaryRegistry::default();
        let a = reg.build(&AdversarySpec::default(), setup()).unwrap();
        assert_eq!(a.name(), "none");
        assert!(a.controlled().is_empty());
    }

    #[test]
    fn at_most_f_replicas_are_byzantine() {
        let reg = AdversaryRegistry::default();
        for f in 1..=3 {
            let s = Setup {
                f,
                n: 2 * f + 1,
                mode: Mode::Detection,
            };
            for name in reg.names() {
                let a = reg.build(&AdversarySpec::named(name), s).unwrap();
                assert!(a.byzantine().len() <= f, "{name} at f={f}");
            }
        }
        // crash_tcs may stop more components than f, but its replicas stay correct
        let spec = AdversarySpec::named("crash_tcs").with("k", 2);
        let a = reg.build(&spec, setup()).unwrap();
        assert_eq!(a.controlled().len(), 2);
        assert!(a.byzantine().is_empty());
    }

    #[test]
    fn registering_twice_replaces() {
        let mut reg = AdversaryRegistry::default();
        reg.register("none", "replaced", NoFaults::build);
        assert_eq!(reg.names().iter().filter(|n| **n == "none").count(), 1);
        assert!(reg.describe().contains(&("none", "replaced")));
    }
}
