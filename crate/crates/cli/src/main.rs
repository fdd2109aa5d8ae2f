use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybrid_smr::resource_model::SizeModel;
use hybrid_smr_cli::*;

/// Trusted-component BFT replication: simulator, attacks and cost model.
///
/// `run` and `attack` accept config overrides as `--path=value`
/// (for example `--sim.delta=0`, `--network.max_delay_ms=8`).
#[derive(Parser)]
#[command(name = "hsmr", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one configuration and write trace.jsonl, summary.json,
    /// tallies.csv and latencies.csv.
    Run {
        /// JSON configuration; defaults are used when omitted.
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $HSMR_OUT_DIR or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Succeed only if the run violates safety.
        #[arg(long)]
        expect_violation: bool,
    },
    /// Decision overhead per (f, B): model and simulator side by side.
    Overhead {
        #[arg(long, value_delimiter = ',', default_value = "10,30")]
        f_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "500")]
        b_list: Vec<usize>,
        /// Add byte overheads for each transaction size in --tx-list.
        #[arg(long)]
        bytes: bool,
        #[arg(long, value_delimiter = ',', default_value = "256,1024")]
        tx_list: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        batches: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resource costs of the six compared protocols.
    Table1 {
        /// Also evaluate every row at this f.
        #[arg(long)]
        f: Option<u64>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scripted attack and tell what happened. Flags that are not
    /// config fields are script parameters (e.g. `--k=2`).
    Attack {
        script: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tallies-schema rows over an (f, B, delta) grid, from the model or
    /// (with --sim) from simulation.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,10")]
        f_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,500")]
        b_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        delta_list: Vec<f64>,
        #[arg(long)]
        sim: bool,
        #[arg(long, default_value_t = 2)]
        batches: u64,
        #[arg(long, default_value_t = 256)]
        tx: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const KNOWN_FLAGS: [&str; 12] = [
    "seed", "out", "f-list", "b-list", "tx-list", "delta-list", "batches", "tx", "f", "json", "bytes", "sim",
];

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE as u8)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let sub = args.get(1).cloned().unwrap_or_default();
    let (args, mut overrides) = if ["run", "attack"].contains(&sub.as_str()) {
        // table1 and overhead take no config, and `f` is an override elsewhere
        let known: Vec<&str> = KNOWN_FLAGS.iter().copied().filter(|k| *k != "f").collect();
        split_overrides(args, &known)
    } else {
        (args, Vec::new())
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            out,
            expect_violation,
        } => {
            if let Some(s) = seed {
                overrides.push(("seed".into(), s.to_string()));
            }
            let cfg = match load_config(config.as_deref(), &overrides) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            let out = out.unwrap_or_else(default_out_dir);
            match cmd_run(&cfg, &out, expect_violation) {
                Ok((res, code)) => {
                    let v = &res.verdicts;
                    println!(
                        "safety: {}  liveness: {}  clients completed: {}/{}  outputs: {}",
                        if v.safe() { "ok" } else { "violated" },
                        if v.live() { "ok" } else { "stalled" },
                        v.responsiveness.len() - v.stalled_clients().len(),
                        v.responsiveness.len(),
                        out.display()
                    );
                    for d in v.violations() {
                        println!("violation: {}", serde_json::to_string(d).expect("violation serializes"));
                    }
                    ExitCode::from(code as u8)
                }
                Err(e) => usage(e),
            }
        }
        Cmd::Overhead {
            f_list,
            b_list,
            bytes,
            tx_list,
            batches,
            seed,
            out,
        } => {
            if f_list.is_empty() || b_list.is_empty() || f_list.contains(&0) || b_list.contains(&0) || batches == 0 {
                return usage("f, B and batch counts must be positive");
            }
            let opts = OverheadOpts {
                f_list,
                b_list,
                bytes,
                tx_list,
                batches,
                seed,
                sizes: SizeModel::default(),
            };
            let rows = match cmd_overhead(&opts) {
                Ok(r) => r,
                Err(e) => return usage(e),
            };
            let lines: Vec<String> = rows.iter().map(|r| r.csv(bytes)).collect();
            let header = overhead_header(bytes);
            println!("{header}");
            for l in &lines {
                println!("{l}");
            }
            let path = out.unwrap_or_else(default_out_dir).join("overhead.csv");
            if let Err(e) = write_csv(&path, &header, &lines) {
                return usage(e);
            }
            ExitCode::from(if rows.iter().all(|r| r.diff_msgs == 0) { EXIT_OK } else { EXIT_VERDICT } as u8)
        }
        Cmd::Table1 { f, json, out } => {
            let (text, js) = cmd_table1(f, &SizeModel::default());
            println!("{}", if json { &js } else { &text });
            let dir = out.unwrap_or_else(default_out_dir);
            let written = fs::create_dir_all(&dir)
                .and_then(|_| fs::write(dir.join("table1.txt"), &text))
                .and_then(|_| fs::write(dir.join("table1.json"), js + "\n"));
            match written {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => usage(e),
            }
        }
        Cmd::Attack { script, seed, out } => {
            if let Some(s) = seed {
                overrides.push(("seed".into(), s.to_string()));
            }
            let cfg = match attack_config(&script, &overrides) {
                Ok(c) => c,
                Err(e) => return usage(e),
            };
            let dir = out.unwrap_or_else(default_out_dir);
            match cmd_attack(&cfg, Some(&dir)) {
                Ok((_, story)) => {
                    for l in story {
                        println!("{l}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => usage(e),
            }
        }
        Cmd::Sweep {
            f_list,
            b_list,
            delta_list,
            sim,
            batches,
            tx,
            seed,
            out,
        } => {
            let opts = SweepOpts {
                f_list,
                b_list,
                delta_list,
                simulate: sim,
                batches,
                tx,
                seed,
                sizes: SizeModel::default(),
            };
            let rows = match cmd_sweep(&opts) {
                Ok(r) => r,
                Err(e) => return usage(e),
            };
            println!("{}", hybrid_smr::sim::TALLY_HEADER);
            for r in &rows {
                println!("{}", r.csv());
            }
            match write_sweep(&out.unwrap_or_else(default_out_dir).join("sweep.csv"), &rows) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => usage(e),
            }
        }
    }
}
