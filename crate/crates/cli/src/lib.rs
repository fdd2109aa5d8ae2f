//! Experiment commands behind the `hsmr` binary. Each command is a plain
//! function so tests can drive it without a process boundary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use hybrid_smr::adversary::AdversaryRegistry;
use hybrid_smr::ids::{ReplicaId, Time, MILLIS};
use hybrid_smr::protocol::{MsgKind, Note};
use hybrid_smr::resource_model::{analytic_counts, decision_byte_overhead, table1, SizeModel, Table1Row};
use hybrid_smr::sim::{
    run, write_tallies, ConfigError, Liveness, Responsiveness, RunResult, SimConfig, TallyRow, TraceLevel,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "HSMR_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERDICT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Reads a JSON configuration (or starts from the defaults) and applies
/// dot-path overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<SimConfig, ConfigError> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(SimConfig::default()).expect("default config serializes"),
    };
    SimConfig::from_value(SimConfig::apply_overrides(base, overrides)?)
}

/// Exit code for a finished run: safe runs pass, unless a violation was
/// the point of the exercise.
pub fn verdict_code(result: &RunResult, expect_violation: bool) -> i32 {
    if result.verdicts.safe() != expect_violation {
        EXIT_OK
    } else {
        EXIT_VERDICT
    }
}

pub fn cmd_run(cfg: &SimConfig, out: &Path, expect_violation: bool) -> io::Result<(RunResult, i32)> {
    let result = run(cfg).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    result.write_outputs(out)?;
    let code = verdict_code(&result, expect_violation);
    Ok((result, code))
}

// ---------------------------------------------------------------------------
// overhead

#[derive(Clone, Debug)]
pub struct OverheadOpts {
    pub f_list: Vec<usize>,
    pub b_list: Vec<usize>,
    /// Adds byte columns and sweeps `tx_list`.
    pub bytes: bool,
    pub tx_list: Vec<usize>,
    /// Full batches ordered per cell.
    pub batches: u64,
    pub seed: u64,
    pub sizes: SizeModel,
}

impl Default for OverheadOpts {
    fn default() -> Self {
        OverheadOpts {
            f_list: vec![10, 30],
            b_list: vec![500],
            bytes: false,
            tx_list: vec![256, 1024],
            batches: 2,
            seed: 1,
            sizes: SizeModel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadRow {
    pub f: u64,
    pub n: u64,
    pub b: u64,
    pub tx: u64,
    pub ops: u64,
    pub analytic_msgs: u64,
    pub sim_msgs: u64,
    /// Per-kind count differences, summed in absolute value; must be 0.
    pub diff_msgs: u64,
    pub analytic_overhead_msgs: f64,
    pub sim_overhead_msgs: f64,
    pub analytic_overhead_bytes: f64,
    pub sim_overhead_bytes: f64,
}

pub const OVERHEAD_HEADER: &str = "f,n,B,tx,ops,analytic_msgs,sim_msgs,diff_msgs,analytic_overhead_msgs,sim_overhead_msgs";

impl OverheadRow {
    pub fn csv(&self, bytes: bool) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            self.f,
            self.n,
            self.b,
            self.tx,
            self.ops,
            self.analytic_msgs,
            self.sim_msgs,
            self.diff_msgs,
            self.analytic_overhead_msgs,
            self.sim_overhead_msgs
        );
        if bytes {
            let _ = write!(s, ",{:.6},{:.6}", self.analytic_overhead_bytes, self.sim_overhead_bytes);
        }
        s
    }
}

pub fn overhead_header(bytes: bool) -> String {
    if bytes {
        format!("{OVERHEAD_HEADER},analytic_overhead_bytes,sim_overhead_bytes")
    } else {
        OVERHEAD_HEADER.to_string()
    }
}

/// A fault-free cell that orders exactly `batches` full batches: one
/// closed-loop client per batch slot, no Decision delay.
pub fn overhead_cell(f: usize, b: usize, tx: usize, batches: u64, seed: u64, sizes: SizeModel) -> SimConfig {
    SimConfig {
        f,
        batch_size: b,
        tx_size: tx,
        clients: b,
        requests_per_client: batches,
        duration_ms: 60_000.0,
        seed,
        delta_ms: 0.0,
        batch_timeout_ms: 1000.0,
        size_model: sizes,
        trace: TraceLevel::Off,
        ..SimConfig::default()
    }
}

pub fn overhead_row(cfg: &SimConfig, batches: u64) -> Result<OverheadRow, ConfigError> {
    let res = run(cfg)?;
    let (f, b) = (cfg.f as u64, cfg.batch_size as u64);
    let ops = b * batches;
    let a = analytic_counts(f, ops, batches, true);
    let kinds = [
        (MsgKind::Request, a.requests),
        (MsgKind::Reply, a.replies),
        (MsgKind::Prepare, a.prepares),
        (MsgKind::Commit, a.commits),
        (MsgKind::Decision, a.decisions),
    ];
    let diff = kinds
        .iter()
        .map(|&(k, want)| res.tally.kind(k).msgs.abs_diff(want))
        .sum();
    let row = TallyRow::of(&res);
    Ok(OverheadRow {
        f,
        n: 2 * f + 1,
        b,
        tx: cfg.tx_size as u64,
        ops: res.ops_executed,
        analytic_msgs: a.total(),
        sim_msgs: row.msgs_total,
        diff_msgs: diff,
        analytic_overhead_msgs: a.decisions as f64 / a.baseline() as f64,
        sim_overhead_msgs: row.overhead_msgs,
        analytic_overhead_bytes: decision_byte_overhead(f, b, &cfg.sizes(), cfg.threshold_proofs),
        sim_overhead_bytes: row.overhead_bytes,
    })
}

pub fn cmd_overhead(opts: &OverheadOpts) -> Result<Vec<OverheadRow>, ConfigError> {
    let txs = if opts.bytes { opts.tx_list.clone() } else { vec![SimConfig::default().tx_size] };
    let mut cells = Vec::new();
    for &tx in &txs {
        for &f in &opts.f_list {
            for &b in &opts.b_list {
                cells.push(overhead_cell(f, b, tx, opts.batches, opts.seed, opts.sizes));
            }
        }
    }
    cells.par_iter().map(|c| overhead_row(c, opts.batches)).collect()
}

// ---------------------------------------------------------------------------
// table1

pub fn table1_text(rows: &[Table1Row]) -> String {
    let metrics: [(&str, fn(&Table1Row) -> String); 4] = [
        ("Replicas", |r| r.replicas.clone()),
        ("Messages handled by leaders", |r| r.leader_msgs.clone()),
        ("Asymmetric crypto/replica", |r| r.crypto_per_replica.clone()),
        ("Seq. TC access/consensus", |r| r.seq_tc_accesses.clone()),
    ];
    let mut out = String::new();
    let _ = write!(out, "{:<30}", "Metric");
    for r in rows {
        let _ = write!(out, "{:>10}", r.protocol);
    }
    out.push('\n');
    for (name, get) in metrics {
        let _ = write!(out, "{name:<30}");
        for r in rows {
            let _ = write!(out, "{:>10}", get(r));
        }
        out.push('\n');
    }
    if let Some(f) = rows.first().and_then(|r| r.at_f).map(|c| c.f) {
        let _ = writeln!(out, "\nat f = {f}:");
        let evaluated: [(&str, fn(&Table1Row) -> u64); 5] = [
            ("Replicas", |r| r.at_f.map_or(0, |c| c.replicas)),
            ("Messages handled by leaders", |r| r.at_f.map_or(0, |c| c.leader_msgs)),
            ("Asymmetric crypto/replica", |r| r.at_f.map_or(0, |c| c.crypto_per_replica)),
            ("Seq. TC access/consensus", |r| r.at_f.map_or(0, |c| c.seq_tc_accesses)),
            ("Leader proposal bytes", |r| r.at_f.map_or(0, |c| c.bytes_per_consensus)),
        ];
        for (name, get) in evaluated {
            let _ = write!(out, "{name:<30}");
            for r in rows {
                let _ = write!(out, "{:>10}", get(r));
            }
            out.push('\n');
        }
    }
    out
}

/// The formatted table and its JSON form.
pub fn cmd_table1(f: Option<u64>, sizes: &SizeModel) -> (String, String) {
    let rows = table1(f, sizes);
    let json = serde_json::to_string_pretty(&rows).expect("table serializes");
    (table1_text(&rows), json)
}

// ---------------------------------------------------------------------------
// attack

/// Config for a curated attack: the script's usual setting plus overrides.
/// Flags that are not config fields become script parameters.
pub fn attack_config(script: &str, flags: &[(String, String)]) -> Result<SimConfig, ConfigError> {
    let registry = AdversaryRegistry::default();
    if !registry.contains(script) {
        return Err(ConfigError::Invalid(format!(
            "unknown script `{script}` (known: {})",
            registry.names().join(", ")
        )));
    }
    let mut base = serde_json::to_value(SimConfig::default()).expect("default config serializes");
    let fields: Vec<String> = base.as_object().expect("object").keys().cloned().collect();
    base["adversary"]["script"] = Value::String(script.to_string());
    base["trace"] = Value::String("notes".into());
    match script {
        // the withholding example is easiest to follow one proposal at a time
        "equivocate_withhold" => base["pipelining"] = Value::Bool(false),
        "counter_identity" => {
            base["vulnerable_tc"] = Value::Bool(true);
            base["counter_acceptance"] = Value::String("leader_announced".into());
            base["pipelining"] = Value::Bool(false);
        }
        _ => {}
    }
    let mut overrides = Vec::new();
    for (k, v) in flags {
        let head = k.strip_prefix("sim.").unwrap_or(k).split('.').next().unwrap_or_default();
        let is_field = fields.iter().any(|f| f == head) || ["B", "delta", "duration"].contains(&head);
        if is_field {
            overrides.push((k.clone(), v.clone()));
        } else {
            overrides.push((format!("adversary.params.{k}"), v.clone()));
        }
    }
    SimConfig::from_value(SimConfig::apply_overrides(base, &overrides)?)
}

fn at(t: Time) -> String {
    format!("t={:.1}ms", t as f64 / MILLIS as f64)
}

/// A readable account of a run: what the adversary did, which view changes
/// fired, where each follower's cursor on the first leader's timeline ended,
/// and the verdicts.
pub fn narrate(res: &RunResult) -> Vec<String> {
    let mut lines: Vec<(Time, String)> = res.narrative.clone();
    let mut flagged: BTreeSet<ReplicaId> = BTreeSet::new();
    let mut failed: BTreeSet<ReplicaId> = BTreeSet::new();
    let mut started: BTreeSet<(ReplicaId, u64)> = BTreeSet::new();
    let mut installed: BTreeSet<u64> = BTreeSet::new();
    for rec in &res.notes {
        let r = rec.replica;
        let line = match &rec.note {
            Note::LeaderFlagged { leader, value } if flagged.insert(r) => {
                format!("{r} flagged {leader} as faulty at value {value}")
            }
            Note::ViewChangeStarted { view } if started.insert((r, *view)) => {
                format!("{r} started a view change to view {view}")
            }
            Note::ViewInstalled { view } if installed.insert(*view) => format!("view {view} installed (first at {r})"),
            Note::TcFailure { op } if failed.insert(r) => format!("{r} cannot use its trusted component: {op}"),
            _ => continue,
        };
        lines.push((rec.t, line));
    }
    lines.sort_by_key(|(t, _)| *t);
    let mut out: Vec<String> = lines.into_iter().map(|(t, s)| format!("{} {s}", at(t))).collect();

    let cursors: Vec<String> = res
        .replicas
        .iter()
        .filter_map(|r| r.leader_cursor.map(|c| format!("{}={c}", r.id)))
        .collect();
    if !cursors.is_empty() {
        out.push(format!("final cursors on r0's timeline: {}", cursors.join(" ")));
    }
    let v = &res.verdicts;
    for c in &v.responsiveness {
        if let Responsiveness::Stalled { client_seq, since } = c.verdict {
            out.push(format!(
                "client {} stalled at request {client_seq} (outstanding since {})",
                c.client.0,
                at(since)
            ));
        }
    }
    if v.all_responsive() {
        out.push("all clients completed".into());
    }
    let safety = if v.safe() {
        "safety preserved".to_string()
    } else {
        let all = v.violations();
        let mut kinds: Vec<String> = Vec::new();
        for x in all {
            let kind = serde_json::to_value(x).expect("violation serializes")["kind"]
                .as_str()
                .unwrap_or_default()
                .to_string();
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        let first = serde_json::to_string(&all[0]).expect("violation serializes");
        format!("SAFETY VIOLATED ({} findings: {}); first: {first}", all.len(), kinds.join(", "))
    };
    let liveness = match &v.liveness {
        Liveness::AllCommitted => "liveness kept".to_string(),
        Liveness::Stalled { requests } => format!("liveness lost ({} requests never executed)", requests.len()),
    };
    out.push(format!("{liveness}, {safety}"));
    out
}

pub fn cmd_attack(cfg: &SimConfig, out: Option<&Path>) -> io::Result<(RunResult, Vec<String>)> {
    let res = run(cfg).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let story = narrate(&res);
    if let Some(dir) = out {
        res.write_outputs(dir)?;
        fs::write(dir.join("narrative.txt"), story.join("\n") + "\n")?;
    }
    Ok((res, story))
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug)]
pub struct SweepOpts {
    pub f_list: Vec<usize>,
    pub b_list: Vec<usize>,
    pub delta_list: Vec<f64>,
    /// Simulate each cell instead of evaluating the model.
    pub simulate: bool,
    pub batches: u64,
    pub tx: usize,
    pub seed: u64,
    pub sizes: SizeModel,
}

impl Default for SweepOpts {
    fn default() -> Self {
        SweepOpts {
            f_list: vec![1, 2, 3, 10],
            b_list: vec![1, 10, 100, 500],
            delta_list: vec![0.0],
            simulate: false,
            batches: 2,
            tx: 256,
            seed: 1,
            sizes: SizeModel::default(),
        }
    }
}

/// Rows in the tallies schema, so model and simulator outputs diff directly.
/// The model only describes δ = 0; other δ values need `simulate`.
pub fn cmd_sweep(opts: &SweepOpts) -> Result<Vec<TallyRow>, ConfigError> {
    let mut cells = Vec::new();
    for &f in &opts.f_list {
        for &b in &opts.b_list {
            for &d in &opts.delta_list {
                cells.push((f, b, d));
            }
        }
    }
    if !opts.simulate {
        if opts.delta_list.iter().any(|d| *d != 0.0) {
            return Err(ConfigError::Invalid("the analytic model covers delta = 0 only; add --sim".into()));
        }
        let sizes = opts.sizes.with_tx(opts.tx as u64);
        return Ok(cells
            .iter()
            .map(|&(f, b, _)| TallyRow::analytic(f as u64, b as u64, opts.batches, &sizes, true, false))
            .collect());
    }
    cells
        .par_iter()
        .map(|&(f, b, d)| {
            let mut cfg = overhead_cell(f, b, opts.tx, opts.batches, opts.seed, opts.sizes);
            cfg.delta_ms = d;
            cfg.validate()?;
            Ok(TallyRow::of(&run(&cfg)?))
        })
        .collect()
}

pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)
}

pub fn write_sweep(path: &Path, rows: &[TallyRow]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_tallies(fs::File::create(path)?, rows)
}

/// Splits `--key=value` flags off an argument list. Flags named in `known`
/// stay for the regular parser.
pub fn split_overrides(args: Vec<String>, known: &[&str]) -> (Vec<String>, Vec<(String, String)>) {
    let mut keep = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if !known.contains(&k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        keep.push(a);
    }
    (keep, overrides)
}
