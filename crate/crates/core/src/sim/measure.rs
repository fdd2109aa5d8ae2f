use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::world::RunResult;
use crate::protocol::MsgKind;
use crate::resource_model::{analytic_counts, SizeModel};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeasureError {
    #[error("baseline must be the same configuration with decisions off: {0}")]
    Mismatch(&'static str),
    #[error("no operations were executed")]
    NoOps,
}

/// Decision overhead of one run against its decisions-off twin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub ops: u64,
    pub msgs_with: u64,
    pub msgs_without: u64,
    pub decision_msgs: u64,
    pub bytes_with: u64,
    pub bytes_without: u64,
    /// Extra messages per ordered operation, relative to the baseline.
    pub overhead_msgs: f64,
    pub overhead_bytes: f64,
}

fn per_op_ratio(with: u64, ops_with: u64, without: u64, ops_without: u64) -> f64 {
    let a = with as f64 / ops_with as f64;
    let b = without as f64 / ops_without as f64;
    (a - b) / b
}

/// Compares ordering traffic (requests, replies, prepares, commits,
/// decisions) per executed operation.
pub fn measure(with: &RunResult, baseline: &RunResult) -> Result<Overhead, MeasureError> {
    if baseline.config.decisions {
        return Err(MeasureError::Mismatch("baseline has decisions on"));
    }
    let mut twin = baseline.config.clone();
    twin.decisions = with.config.decisions;
    if twin != with.config {
        return Err(MeasureError::Mismatch("configurations differ"));
    }
    if with.ops_executed == 0 || baseline.ops_executed == 0 {
        return Err(MeasureError::NoOps);
    }
    let (w, b) = (with.tally.ordering(), baseline.tally.ordering());
    Ok(Overhead {
        ops: with.ops_executed,
        msgs_with: w.msgs,
        msgs_without: b.msgs,
        decision_msgs: with.tally.kind(MsgKind::Decision).msgs,
        bytes_with: w.bytes,
        bytes_without: b.bytes,
        overhead_msgs: per_op_ratio(w.msgs, with.ops_executed, b.msgs, baseline.ops_executed),
        overhead_bytes: per_op_ratio(w.bytes, with.ops_executed, b.bytes, baseline.ops_executed),
    })
}

pub const TALLY_HEADER: &str = "f,n,B,delta,decisions,msgs_total,msgs_decision,bytes_total,overhead_msgs,overhead_bytes";

/// One tallies row: ordering traffic of a run. Overheads are Decisions over
/// all other ordering traffic of the same run, which for fault-free runs
/// equals the paired-baseline measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TallyRow {
    pub f: u64,
    pub n: u64,
    pub b: u64,
    pub delta_ms: f64,
    pub decisions: bool,
    pub msgs_total: u64,
    pub msgs_decision: u64,
    pub bytes_total: u64,
    pub overhead_msgs: f64,
    pub overhead_bytes: f64,
}

impl TallyRow {
    pub fn of(run: &RunResult) -> TallyRow {
        let total = run.tally.ordering();
        let dec = run.tally.kind(MsgKind::Decision);
        let ratio = |extra: u64, all: u64| {
            if all > extra {
                extra as f64 / (all - extra) as f64
            } else {
                0.0
            }
        };
        TallyRow {
            f: run.config.f as u64,
            n: run.config.n() as u64,
            b: run.config.batch_size as u64,
            delta_ms: run.config.delta_ms,
            decisions: run.config.decisions,
            msgs_total: total.msgs,
            msgs_decision: dec.msgs,
            bytes_total: total.bytes,
            overhead_msgs: ratio(dec.msgs, total.msgs),
            overhead_bytes: ratio(dec.bytes, total.bytes),
        }
    }

    /// The row a fault-free run with δ = 0 and `batches` full batches must
    /// produce, computed from the analytic model.
    pub fn analytic(f: u64, b: u64, batches: u64, sizes: &SizeModel, decisions: bool, threshold: bool) -> TallyRow {
        let n = 2 * f + 1;
        let c = analytic_counts(f, b * batches, batches, decisions);
        let dec_bytes = c.decisions * sizes.decision(f, threshold);
        let base_bytes = c.requests * sizes.request()
            + c.replies * sizes.reply()
            + c.prepares * sizes.prepare(b)
            + c.commits * sizes.commit();
        let ratio = |extra: u64, base: u64| if base > 0 { extra as f64 / base as f64 } else { 0.0 };
        TallyRow {
            f,
            n,
            b,
            delta_ms: 0.0,
            decisions,
            msgs_total: c.total(),
            msgs_decision: c.decisions,
            bytes_total: base_bytes + dec_bytes,
            overhead_msgs: ratio(c.decisions, c.baseline()),
            overhead_bytes: ratio(dec_bytes, base_bytes),
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.f,
            self.n,
            self.b,
            self.delta_ms,
            if self.decisions { "on" } else { "off" },
            self.msgs_total,
            self.msgs_decision,
            self.bytes_total,
            self.overhead_msgs,
            self.overhead_bytes
        )
    }
}

pub fn write_tallies<W: Write>(mut w: W, rows: &[TallyRow]) -> io::Result<()> {
    writeln!(w, "{TALLY_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}
