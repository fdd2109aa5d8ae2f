//! Randomised search for agreement violations: many short runs with random
//! network timing, script parameters and (sometimes) a healing partition,
//! each checked by the global oracle. Runs are independent and spread over
//! threads.

use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::adversary::AdversarySpec;
use crate::crypto::seeded_rng;
use crate::protocol::Mode;
use crate::tc::CertMode;

use super::config::{NetworkConfig, Partition, SimConfig, TraceLevel};
use super::oracle::Violation;
use super::world::run;

#[derive(Clone, Debug)]
pub struct FuzzConfig {
    pub script: String,
    pub f: usize,
    pub seeds: std::ops::Range<u64>,
    pub mode: Mode,
}

#[derive(Clone, Debug, Default)]
pub struct FuzzReport {
    pub runs: u64,
    /// Runs in which some correct replica moved to a later view.
    pub view_changes: u64,
    pub stalled: u64,
    pub violations: Vec<(u64, Violation)>,
}

/// The configuration fuzzed for one seed.
pub fn fuzz_case(cfg: &FuzzConfig, seed: u64) -> SimConfig {
    let mut rng = seeded_rng(seed, &format!("fuzz/{}/{}", cfg.script, cfg.f), 0);
    let n = 2 * cfg.f as u32 + 1;
    let x: u64 = rng.gen_range(1..=8);
    let mut adversary = AdversarySpec::named(&cfg.script);
    match cfg.script.as_str() {
        "equivocate_withhold" => {
            adversary = adversary
                .with("x_value", json!(x))
                .with("y_value", json!(x + rng.gen_range(1..=8)))
                .with("reveal_both", json!(rng.gen_bool(0.2)));
        }
        "gap_forever" => adversary = adversary.with("value", json!(x)),
        _ => {}
    }
    let min_delay = rng.gen_range(0.2..2.0);
    let mut network = NetworkConfig {
        min_delay_ms: min_delay,
        max_delay_ms: min_delay + rng.gen_range(0.5..8.0),
        ..NetworkConfig::default()
    };
    if rng.gen_bool(0.3) {
        let start = rng.gen_range(0.0..40.0);
        let cut = rng.gen_range(0..n);
        network.partitions.push(Partition {
            start_ms: start,
            end_ms: start + rng.gen_range(5.0..200.0),
            groups: vec![vec![cut]],
        });
    }
    SimConfig {
        f: cfg.f,
        clients: rng.gen_range(1..=3),
        requests_per_client: 3,
        duration_ms: 1500.0,
        seed,
        mode: cfg.mode,
        pipelining: rng.gen_bool(0.5),
        decisions: rng.gen_bool(0.7),
        adversary,
        tc_mode: CertMode::Hmac,
        view_change_timeout_ms: rng.gen_range(20.0..120.0),
        retransmit_ms: 100.0,
        network,
        trace: TraceLevel::Off,
        ..SimConfig::default()
    }
}

pub fn fuzz(cfg: &FuzzConfig) -> FuzzReport {
    let outcomes: Vec<(u64, bool, bool, Vec<Violation>)> = cfg
        .seeds
        .clone()
        .into_par_iter()
        .map(|seed| {
            let sim = fuzz_case(cfg, seed);
            let res = run(&sim).expect("fuzz configuration is valid");
            let moved = res.replicas.iter().any(|r| !r.byzantine && r.view > 0);
            let stalled = !res.verdicts.all_responsive();
            (seed, moved, stalled, res.verdicts.violations().to_vec())
        })
        .collect();
    let mut report = FuzzReport::default();
    for (seed, moved, stalled, violations) in outcomes {
        report.runs += 1;
        report.view_changes += moved as u64;
        report.stalled += stalled as u64;
        report.violations.extend(violations.into_iter().map(|v| (seed, v)));
    }
    report
}
