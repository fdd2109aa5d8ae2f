use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adversary::{AdversaryRegistry, AdversarySpec, Setup};
use crate::clients::ReplyPolicy;
use crate::ids::{Time, MILLIS};
use crate::protocol::{CounterAcceptance, Mode, ProtocolConfig};
use crate::resource_model::SizeModel;
use crate::tc::{CertMode, CounterPolicy, TcConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Messages between replicas of different groups are held during the
/// window and delivered once it ends. Replicas not listed form one more group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub start_ms: f64,
    pub end_ms: f64,
    pub groups: Vec<Vec<u32>>,
}

impl Partition {
    fn group_of(&self, r: u32) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&r))
            .unwrap_or(self.groups.len())
    }

    pub fn separates(&self, a: u32, b: u32) -> bool {
        self.group_of(a) != self.group_of(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// One-way delays are uniform in [min, max].
    pub min_delay_ms: f64,
    pub max_delay_ms: f64,
    /// Probability that a message is lost. Certified messages of correct
    /// replicas are never retransmitted, so anything above 0 can stall a
    /// sender's timeline for good.
    pub drop_rate: f64,
    pub partitions: Vec<Partition>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            min_delay_ms: 1.0,
            max_delay_ms: 5.0,
            drop_rate: 0.0,
            partitions: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn mean_delay_ms(&self) -> f64 {
        (self.min_delay_ms + self.max_delay_ms) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    /// Nothing recorded.
    Off,
    /// Protocol notes, timers, client completions and script narration.
    Notes,
    /// Additionally every send, drop and delivery.
    Full,
}

/// One simulation run. Times are in milliseconds of virtual time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub f: usize,
    #[serde(alias = "B")]
    pub batch_size: usize,
    /// Request payload bytes; also the transaction size of the byte model.
    pub tx_size: usize,
    pub clients: usize,
    /// Requests each client issues; 0 keeps clients busy until the horizon.
    pub requests_per_client: u64,
    #[serde(alias = "duration")]
    pub duration_ms: f64,
    pub seed: u64,
    pub mode: Mode,
    pub decisions: bool,
    #[serde(alias = "delta")]
    pub delta_ms: f64,
    pub pipelining: bool,
    pub pipeline_depth: u64,
    pub reply_policy: ReplyPolicy,
    pub adversary: AdversarySpec,
    pub size_model: SizeModel,
    pub tc_mode: CertMode,
    /// Components create counters on demand (only with `counter_identity`).
    pub vulnerable_tc: bool,
    pub counter_acceptance: CounterAcceptance,
    pub threshold_proofs: bool,
    pub batch_timeout_ms: f64,
    pub checkpoint_interval: u64,
    pub window: u64,
    pub view_change_timeout_ms: f64,
    pub fetch_delay_ms: f64,
    /// Client retransmission timeout; 0 disables retransmission.
    pub retransmit_ms: f64,
    /// A client request outstanding this long counts as stalled. Defaults to
    /// 100 mean round trips.
    pub stall_ms: Option<f64>,
    pub network: NetworkConfig,
    pub trace: TraceLevel,
    /// Record every certificate issued (always on in prevention mode).
    pub audit: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            f: 1,
            batch_size: 1,
            tx_size: 256,
            clients: 4,
            requests_per_client: 10,
            duration_ms: 2000.0,
            seed: 42,
            mode: Mode::Detection,
            decisions: true,
            delta_ms: 6.0,
            pipelining: true,
            pipeline_depth: 4,
            reply_policy: ReplyPolicy::NMinusF,
            adversary: AdversarySpec::named("none"),
            size_model: SizeModel::default(),
            tc_mode: CertMode::Sig,
            vulnerable_tc: false,
            counter_acceptance: CounterAcceptance::Pinned,
            threshold_proofs: false,
            batch_timeout_ms: 6.0,
            checkpoint_interval: 100,
            window: 200,
            view_change_timeout_ms: 200.0,
            fetch_delay_ms: 10.0,
            retransmit_ms: 0.0,
            stall_ms: None,
            network: NetworkConfig::default(),
            trace: TraceLevel::Full,
            audit: false,
        }
    }
}

pub(crate) fn ms(v: f64) -> Time {
    (v * MILLIS as f64).round() as Time
}

/// Field names accepted in overrides besides the canonical ones.
const ALIASES: [(&str, &str); 3] = [
    ("delta", "delta_ms"),
    ("B", "batch_size"),
    ("duration", "duration_ms"),
];

impl SimConfig {
    pub fn n(&self) -> usize {
        2 * self.f + 1
    }

    pub fn from_json(text: &str) -> Result<SimConfig, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = serde_json::from_value(v).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `path=value` overrides (dot-separated paths, optional `sim.`
    /// prefix) to a JSON configuration. Values are read as JSON where
    /// possible and as strings otherwise; `on`/`off` set boolean fields.
    pub fn apply_overrides(mut base: Value, overrides: &[(String, String)]) -> Result<Value, ConfigError> {
        for (path, raw) in overrides {
            let path_trim = path.strip_prefix("sim.").unwrap_or(path);
            let mut keys: Vec<String> = path_trim.split('.').map(str::to_string).collect();
            if keys.iter().any(String::is_empty) {
                return Err(ConfigError::Override(path.clone(), "empty path segment".into()));
            }
            if keys.len() == 1 {
                if let Some((_, canon)) = ALIASES.iter().find(|(a, _)| *a == keys[0]) {
                    keys[0] = canon.to_string();
                }
            }
            let was_bool = keys
                .iter()
                .try_fold(&base, |node, k| node.get(k))
                .is_some_and(Value::is_boolean);
            let value: Value = match raw.as_str() {
                "on" if was_bool => Value::Bool(true),
                "off" if was_bool => Value::Bool(false),
                _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone())),
            };
            let mut node = &mut base;
            for (i, k) in keys.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| ConfigError::Override(path.clone(), format!("`{k}` is not inside an object")))?;
                if i + 1 == keys.len() {
                    obj.insert(k.clone(), value.clone());
                    break;
                }
                node = obj.entry(k.clone()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        Ok(base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.f < 1 {
            return Err(invalid("f must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.clients < 1 {
            return Err(invalid("at least one client is needed"));
        }
        if self.tx_size < 9 {
            return Err(invalid("tx_size must be at least 9 bytes (the encoded operation)"));
        }
        if !(self.duration_ms > 0.0) {
            return Err(invalid("duration must be positive"));
        }
        for (name, v) in [
            ("delta_ms", self.delta_ms),
            ("batch_timeout_ms", self.batch_timeout_ms),
            ("view_change_timeout_ms", self.view_change_timeout_ms),
            ("fetch_delay_ms", self.fetch_delay_ms),
            ("retransmit_ms", self.retransmit_ms),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be a non-negative number")));
            }
        }
        if self.view_change_timeout_ms <= 0.0 {
            return Err(invalid("view_change_timeout_ms must be positive"));
        }
        if self.checkpoint_interval < 1 || self.window < self.checkpoint_interval {
            return Err(invalid("need 1 ≤ checkpoint_interval ≤ window"));
        }
        if self.pipeline_depth < 1 {
            return Err(invalid("pipeline_depth must be at least 1"));
        }
        let net = &self.network;
        if !(net.min_delay_ms > 0.0) || net.max_delay_ms < net.min_delay_ms {
            return Err(invalid("network delays need 0 < min ≤ max"));
        }
        if !(0.0..1.0).contains(&net.drop_rate) {
            return Err(invalid("drop_rate must be in [0, 1)"));
        }
        for p in &net.partitions {
            if !(p.start_ms >= 0.0) || p.end_ms < p.start_ms {
                return Err(invalid("partition windows need 0 ≤ start ≤ end"));
            }
            if p.groups.iter().flatten().any(|r| *r as usize >= self.n()) {
                return Err(invalid("partition names an unknown replica"));
            }
        }
        if let Some(s) = self.stall_ms {
            if !(s > 0.0) {
                return Err(invalid("stall_ms must be positive"));
            }
        }
        self.size_model
            .with_tx(self.tx_size as u64)
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let script = self.adversary.script_name();
        if self.vulnerable_tc && script != "counter_identity" {
            return Err(invalid(
                "vulnerable_tc is only allowed together with the counter_identity script",
            ));
        }
        if self.vulnerable_tc && self.mode != Mode::Detection {
            return Err(invalid("vulnerable_tc needs detection mode"));
        }
        AdversaryRegistry::default()
            .build(&self.adversary, self.setup())
            .map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    pub fn setup(&self) -> Setup {
        Setup {
            f: self.f,
            n: self.n(),
            mode: self.mode,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        let mut p = ProtocolConfig::new(self.f);
        p.batch_size = self.batch_size;
        p.batch_timeout = ms(self.batch_timeout_ms);
        p.checkpoint_interval = self.checkpoint_interval;
        p.window = self.window;
        p.pipelining = self.pipelining;
        p.pipeline_depth = self.pipeline_depth;
        p.decisions = self.decisions;
        p.decision_delay = ms(self.delta_ms);
        p.threshold_proofs = self.threshold_proofs;
        p.mode = self.mode;
        p.counter_acceptance = self.counter_acceptance;
        p.view_change_timeout = ms(self.view_change_timeout_ms);
        p.fetch_delay = ms(self.fetch_delay_ms);
        p
    }

    pub fn tc(&self) -> TcConfig {
        TcConfig {
            mode: self.tc_mode,
            policy: if self.vulnerable_tc {
                CounterPolicy::Vulnerable
            } else {
                CounterPolicy::Strict
            },
            audit: self.audit || self.mode == Mode::Prevention,
            ..TcConfig::default()
        }
    }

    pub fn sizes(&self) -> SizeModel {
        self.size_model.with_tx(self.tx_size as u64)
    }

    pub fn stall_after(&self) -> Time {
        match self.stall_ms {
            Some(s) => ms(s),
            None => ms(100.0 * 2.0 * self.network.mean_delay_ms()),
        }
    }
}
