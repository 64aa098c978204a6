use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use railkit::gateway::{Gateway, GatewayConfig, DEFAULT_PORT, DEFAULT_SNAPSHOT_HZ};
use railkit::sim::{diff_traces, read_trace_file, replay_trace, Scenario, Simulation};
use railkit::teleop::{emulate_operator, follower_port, OperatorScript};
use railkit::vfi::lint_vfi_config;

/// Multi-branch kinematic control, VFI safety constraints and teleoperation simulation.
#[derive(Debug, Parser)]
#[command(name = "railkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write a trace.
    Run {
        /// Scenario YAML file.
        #[arg(long)]
        scenario: PathBuf,
        /// VFI file overriding the one named in the scenario.
        #[arg(long)]
        vfi: Option<PathBuf>,
        /// Simulated duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Trace CSV output path.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Random seed overriding the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Read a trace back, optionally pacing it and diffing against a fresh run.
    Replay {
        /// Trace CSV written by `run`.
        #[arg(long)]
        trace: PathBuf,
        /// Playback speed relative to real time; omitted means as fast as possible.
        #[arg(long)]
        speed: Option<f64>,
        /// Re-simulate this scenario and compare it with the trace.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Seed for the re-simulation.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a VFI configuration file.
    VfiLint {
        /// VFI YAML file.
        path: PathBuf,
        /// Comma-separated joint counts per branch for index checks, e.g. 8,8,9,9.
        #[arg(long, value_delimiter = ',')]
        dofs: Option<Vec<usize>>,
    },
    /// Stream a scripted master pose sequence over UDP.
    OperatorEmulate {
        /// One-based follower branch.
        #[arg(long)]
        branch: usize,
        /// Destination port; defaults to 9871 for branch 1, 9872 for branch 2 and so on.
        #[arg(long)]
        port: Option<u16>,
        /// Destination host.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Operator script YAML file.
        #[arg(long)]
        script: PathBuf,
        /// Playback speed relative to real time.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Seconds of failed sends before giving up.
        #[arg(long, default_value_t = 2.0)]
        timeout: f64,
    },
    /// Run a scenario in real time behind the websocket gateway.
    Serve {
        /// Scenario YAML file.
        #[arg(long)]
        scenario: PathBuf,
        /// Listening port.
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Listening address.
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Snapshot rate in Hz.
        #[arg(long, default_value_t = DEFAULT_SNAPSHOT_HZ)]
        rate: f64,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

type Failure = String;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RAILKIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run { scenario, vfi, duration, trace, seed } => run(&scenario, vfi, duration, trace, seed),
        Command::Replay { trace, speed, scenario, seed } => replay(&trace, speed, scenario, seed),
        Command::VfiLint { path, dofs } => vfi_lint(&path, dofs.as_deref()),
        Command::OperatorEmulate { branch, port, host, script, speed, timeout } => {
            operator_emulate(branch, port, &host, &script, speed, timeout)
        }
        Command::Serve { scenario, port, host, rate, speed } => serve(&scenario, &host, port, rate, speed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_scenario(path: &Path, vfi: Option<PathBuf>, duration: Option<f64>, seed: Option<u64>) -> Result<Scenario, Failure> {
    let mut s = Scenario::from_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(v) = vfi {
        let abs = std::path::absolute(&v).map_err(|e| format!("{}: {e}", v.display()))?;
        s.file.vfi = Some(abs.display().to_string());
    }
    if let Some(d) = duration {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(format!("--duration must be non-negative, got {d}"));
        }
        s.file.duration = d;
    }
    if let Some(seed) = seed {
        s.file.seed = seed;
    }
    Ok(s)
}

fn run(path: &Path, vfi: Option<PathBuf>, duration: Option<f64>, trace: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let scenario = load_scenario(path, vfi, duration, seed)?;
    let mut sim = Simulation::new(scenario).map_err(|e| e.to_string())?;
    let summary = match &trace {
        Some(out) => {
            let f = File::create(out).map_err(|e| format!("{}: {e}", out.display()))?;
            sim.run_to_trace(BufWriter::new(f)).map_err(|e| e.to_string())?
        }
        None => sim.run(|_| {}),
    };
    print!("{}", summary.report());
    if let Some(out) = trace {
        println!("trace: {}", out.display());
    }
    Ok(())
}

fn replay(trace: &Path, speed: Option<f64>, scenario: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let records = read_trace_file(trace).map_err(|e| format!("{}: {e}", trace.display()))?;
    let elapsed = replay_trace(&records, speed, |_| {});
    println!("replayed {} records in {:.3} s", records.len(), elapsed.as_secs_f64());
    let Some(sc) = scenario else { return Ok(()) };
    let mut s = load_scenario(&sc, None, None, seed)?;
    let steps = records.len().saturating_sub(1) as f64;
    s.file.duration = steps * s.file.dt;
    let mut sim = Simulation::new(s).map_err(|e| e.to_string())?;
    let mut fresh = Vec::with_capacity(records.len());
    sim.run(|i| fresh.push(i.record.clone()));
    let d = diff_traces(&records, &fresh);
    println!("compared {} records, max joint difference {:e}", d.compared, d.max_joint_diff);
    if d.is_identical() {
        println!("identical");
        Ok(())
    } else {
        Err(match d.first_mismatch {
            Some(t) => format!("trace differs from re-simulation starting at tick {t}"),
            None => "trace and re-simulation differ in length".into(),
        })
    }
}

fn vfi_lint(path: &Path, dofs: Option<&[usize]>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let report = lint_vfi_config(&text, dofs);
    if let Some(e) = &report.fatal {
        return Err(format!("{}: {e}", path.display()));
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    for (i, entry) in report.entries.iter().enumerate() {
        match entry {
            Ok(s) => println!(
                "entry {} (line {}): ok, {} {} {}-{}, d_safe {}",
                i + 1,
                s.line,
                s.vfi_type,
                s.direction,
                s.first.shape.kind(),
                s.second.shape.kind(),
                s.safe_distance
            ),
            Err(e) => println!("entry {}: {e}", i + 1),
        }
    }
    if report.is_valid() {
        println!("{} constraints", report.valid_count());
        Ok(())
    } else {
        let bad: Vec<String> = report.entries.iter().filter_map(|e| e.as_ref().err()).map(|e| e.line().to_string()).collect();
        Err(format!("{}: invalid entries at lines {}", path.display(), bad.join(", ")))
    }
}

fn operator_emulate(branch: usize, port: Option<u16>, host: &str, script: &Path, speed: f64, timeout: f64) -> Result<(), Failure> {
    if branch == 0 {
        return Err("--branch is one-based".into());
    }
    if !(speed > 0.0 && timeout >= 0.0) {
        return Err("--speed must be positive and --timeout non-negative".into());
    }
    let script = OperatorScript::from_file(script).map_err(|e| e.to_string())?;
    let port = port.unwrap_or_else(|| follower_port(branch - 1));
    let sent = emulate_operator((host, port), &script, speed, Duration::from_secs_f64(timeout)).map_err(|e| e.to_string())?;
    println!("sent {sent} packets to {host}:{port}");
    Ok(())
}

fn serve(path: &Path, host: &str, port: u16, rate: f64, speed: f64) -> Result<(), Failure> {
    if !(rate > 0.0 && speed > 0.0) {
        return Err("--rate and --speed must be positive".into());
    }
    let scenario = load_scenario(path, None, None, None)?;
    let sim = Simulation::new(scenario).map_err(|e| e.to_string())?;
    let addr = format!("{host}:{port}")
        .parse()
        .or_else(|_| std::net::ToSocketAddrs::to_socket_addrs(&(host, port)).map_err(|e| e.to_string()).and_then(|mut a| a.next().ok_or_else(|| "no address".to_string())))
        .map_err(|e| format!("{host}:{port}: {e}"))?;
    let gw = Gateway::start(sim, GatewayConfig { addr, rate_hz: rate, speed }).map_err(|e| format!("{addr}: {e}"))?;
    println!("gateway listening on ws://{}", gw.local_addr);
    gw.wait();
    Ok(())
}
