use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wlan_pf::controller::{ClosedLoopScript, Scheme};
use wlan_pf::experiments::{self, Scenario, SimulateOptions};
use wlan_pf::sim::{write_trace_csv, SimMode};
use wlan_pf::{Error, Exec};

/// Multi-rate 802.11 airtime model, proportional-fair window allocation and
/// slot-level simulator.
#[derive(Parser)]
#[command(name = "wlan-pf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-station throughput and airtime under DCF and the proportional-fair allocation.
    Model(Common),
    /// Exact and rounded windows of the proportional-fair allocation.
    Optimize(Common),
    /// Slot-level simulation of one scheme.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "p-persistent")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "rpf")]
        scheme: SchemeArg,
        #[arg(long)]
        slots: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write a per-slot trace (CSV) to this path.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Closed-loop run of a timed script.
    ClosedLoop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Model evaluation across the scenario's payload sweep.
    SweepPayload {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sequential: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PPersistent,
    Backoff,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Rpf,
    Dcf,
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_scenario(path: &Path) -> anyhow::Result<Scenario> {
    Ok(Scenario::from_toml_str(&read(path)?)?)
}

fn emit<T: Serialize>(rows: &[T], common: &Common) -> anyhow::Result<()> {
    let sink: Box<dyn Write> = match &common.out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    match common.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut sink);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Format::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut sink, r)?;
                sink.write_all(b"\n")?;
            }
        }
    }
    sink.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Model(c) => emit(&experiments::cmd_model(&load_scenario(&c.scenario)?)?, &c),
        Command::Optimize(c) => emit(&experiments::cmd_optimize(&load_scenario(&c.scenario)?)?, &c),
        Command::Simulate {
            common,
            mode,
            scheme,
            slots,
            seed,
            trace,
            sequential,
        } => {
            let sc = load_scenario(&common.scenario)?;
            let opts = SimulateOptions {
                mode: match mode {
                    ModeArg::PPersistent => SimMode::PPersistent,
                    ModeArg::Backoff => SimMode::Backoff,
                },
                scheme: match scheme {
                    SchemeArg::Rpf => Scheme::Rpf,
                    SchemeArg::Dcf => Scheme::Dcf,
                },
                slots,
                seed,
                exec: exec(sequential),
                trace: trace.is_some(),
            };
            let (rows, result) = experiments::cmd_simulate(&sc, &opts)?;
            if let (Some(path), Some(records)) = (trace, result.trace.as_ref()) {
                let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_trace_csv(records, BufWriter::new(f))?;
            }
            emit(&rows, &common)
        }
        Command::ClosedLoop { common, seed } => {
            let mut script = ClosedLoopScript::from_toml_str(&read(&common.scenario)?)?;
            if let Some(s) = seed {
                script.seed = s;
            }
            emit(&experiments::cmd_closed_loop(&script)?, &common)
        }
        Command::SweepPayload { common, sequential } => {
            let sc = load_scenario(&common.scenario)?;
            emit(&experiments::cmd_sweep_payload(&sc, exec(sequential))?, &common)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonConvergence { .. } | Error::NonUnique { .. }) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
