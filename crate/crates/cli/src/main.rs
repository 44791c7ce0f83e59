mod device_cmd;
mod net;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use awarenet_core::logfmt::{self, format_time, Warning};
use awarenet_sim::{run_scenario, Script, SimConfig, SimError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "awarenet",
    version,
    about = "Proximity-aware notes: simulator, log analysis, broker and device tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script and write its trace directory.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Simulation config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trace directory; defaults to trace/<scenario file stem>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a detection log.
    Analyze {
        log: PathBuf,
        /// Re-entries faster than this count as flaps.
        #[arg(long, default_value_t = 30_000)]
        scan_period_ms: i64,
        /// Also list every session.
        #[arg(long)]
        sessions: bool,
    },
    /// Serve the push broker over TCP.
    Broker {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Load from and save to this file after every change.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Operate one device kept in a data directory.
    Device(device_cmd::DeviceArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, config, out } => return cmd_run(&scenario, seed, config.as_deref(), out),
        Command::Analyze { log, scan_period_ms, sessions } => cmd_analyze(&log, scan_period_ms, sessions),
        Command::Broker { listen, snapshot } => net::serve(&listen, snapshot),
        Command::Device(args) => device_cmd::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Exit 0 when every expectation passes, 1 when one fails, 2 when the run
/// could not happen at all.
fn cmd_run(path: &Path, seed: u64, config: Option<&Path>, out: Option<PathBuf>) -> ExitCode {
    let prepared = (|| -> Result<(Script, SimConfig)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let script = Script::from_toml(&text)?;
        let config = match config {
            Some(p) => SimConfig::from_toml(
                &std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            )?,
            None => SimConfig::default(),
        };
        Ok((script, config))
    })();
    let (script, config) = match prepared {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let trace = match run_scenario(&script, &config, seed) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into());
    let out = out.unwrap_or_else(|| PathBuf::from("trace").join(stem));
    if let Err(e) = trace.write(&out) {
        eprintln!("error: writing trace: {e}");
        return ExitCode::from(2);
    }
    print!("{}", trace.expectations_report());
    println!("trace {}", out.display());
    match trace.check() {
        Ok(()) => {
            println!("PASS {}", trace.name);
            ExitCode::SUCCESS
        }
        Err(SimError::ExpectationFailed { step, tag, actual }) => {
            println!("FAIL step {step} ({tag}): {actual}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_analyze(path: &Path, scan_period_ms: i64, list_sessions: bool) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = logfmt::parse(&text)?;
    logfmt::sort_chronologically(&mut lines);
    let rec = logfmt::reconstruct_sessions(&lines, scan_period_ms);
    let open = rec.sessions.iter().filter(|s| s.is_open()).count();
    println!("lines {}", lines.len());
    println!("devices {}", rec.stats.distinct_devices);
    println!("sessions {}", rec.sessions.len());
    println!("open_sessions {open}");
    println!("flap_candidates {}", rec.flaps.len());
    println!("warnings {}", rec.warnings.len());
    println!("max_simultaneous {}", rec.stats.max_simultaneous);
    for (hour, n) in rec.stats.arrivals_per_hour.iter().enumerate() {
        println!("hour {hour:02} {n}");
    }
    for f in &rec.flaps {
        println!(
            "flap {} exited {} reentered {} gap_ms {}",
            f.device,
            format_time(f.exited_at),
            format_time(f.reentered_at),
            f.gap_ms()
        );
    }
    for w in &rec.warnings {
        match w {
            Warning::ExitWithoutEntry { device, at } => {
                println!("warning exit_without_entry {device} {}", format_time(*at))
            }
            Warning::RepeatedEntry { device, at } => println!("warning repeated_entry {device} {}", format_time(*at)),
        }
    }
    if list_sessions {
        for s in &rec.sessions {
            let exited = s.exited_at.map(format_time).unwrap_or_else(|| "open".into());
            let known = if s.known { "known" } else { "unknown" };
            println!("session {} {known} {} {exited}", s.device, format_time(s.entered_at));
        }
    }
    Ok(())
}
