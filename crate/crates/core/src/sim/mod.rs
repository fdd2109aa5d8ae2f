//! Deterministic discrete-event simulation of a deployment: replicas,
//! closed-loop clients, a delay/drop/partition network and an adversary
//! script, followed by global safety, liveness and responsiveness verdicts.
//!
//! A run is single-threaded and fully determined by its configuration
//! (including the seed). Independent runs may be spread over threads.

mod config;
pub mod explore;
pub mod fuzz;
mod measure;
mod oracle;
mod trace;
mod world;

use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

pub use config::{ConfigError, NetworkConfig, Partition, SimConfig, TraceLevel};
pub use measure::{measure, write_tallies, MeasureError, Overhead, TallyRow, TALLY_HEADER};
pub use oracle::{
    duplicate_contexts, AgreementCheck, ClientVerdict, Liveness, Responsiveness, Safety, Termination,
    Verdicts, Violation,
};
pub use trace::{Count, LinkClass, NetTally, Trace, ORDERING};
pub use world::{run, ClientSummary, NoteRecord, ReplicaSummary, RunResult, Simulation};

use crate::clients::write_latency_csv;
use crate::ids::Time;

/// The machine-readable digest of a run written as summary.json.
#[derive(Serialize)]
pub struct Summary<'a> {
    pub config: &'a SimConfig,
    pub verdicts: &'a Verdicts,
    pub end_time: Time,
    pub quiescent: bool,
    pub ops_executed: u64,
    pub batches_executed: u64,
    pub messages: &'a NetTally,
    pub replicas: &'a [ReplicaSummary],
    pub clients: &'a [ClientSummary],
    pub narrative: Vec<String>,
    pub tallies: TallyRow,
}

impl RunResult {
    pub fn summary(&self) -> Summary<'_> {
        Summary {
            config: &self.config,
            verdicts: &self.verdicts,
            end_time: self.end_time,
            quiescent: self.quiescent,
            ops_executed: self.ops_executed,
            batches_executed: self.batches_executed,
            messages: &self.tally,
            replicas: &self.replicas,
            clients: &self.clients,
            narrative: self
                .narrative
                .iter()
                .map(|(t, s)| format!("t={:.3}ms {s}", *t as f64 / 1e6))
                .collect(),
            tallies: TallyRow::of(self),
        }
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    /// Writes trace.jsonl, summary.json, tallies.csv and latencies.csv.
    pub fn write_outputs(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        self.trace.write_jsonl(io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?))?;
        fs::write(dir.join("summary.json"), self.summary_json() + "\n")?;
        write_tallies(fs::File::create(dir.join("tallies.csv"))?, &[TallyRow::of(self)])?;
        write_latency_csv(fs::File::create(dir.join("latencies.csv"))?, &self.latencies)?;
        Ok(())
    }
}
