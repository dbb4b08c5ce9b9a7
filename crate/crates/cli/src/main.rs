use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stt_core::bench::{run_bench, BenchSpec};
use stt_core::scenario::{bundled_bench_spec, Overrides, Scenario};
use stt_core::sim::{
    audit, compute_metrics, radius_ode_residual, run_episode, write_rows_csv, AuditLimits, EpisodeLog, RunOptions,
    Status,
};
use stt_server::{replay, CommandScript, ServerConfig, SessionConfig};

/// Spatiotemporal tube navigation: episodes, benchmarks and live sessions.
#[derive(Debug, Parser)]
#[command(name = "stt", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    /// Run even if validation reports violations.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Run one episode and write its JSON-lines log.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Override the disturbance bound.
        #[arg(long)]
        disturbance: Option<f64>,
        /// Log path; defaults to `<scenario name>.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Run a randomized benchmark and write its JSON report.
    Bench {
        /// Benchmark spec file, or the name of a bundled spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Zero the timing fields so reports are byte-stable.
        #[arg(long)]
        no_timing: bool,
    },
    /// Check a scenario against the task preconditions.
    Validate {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Audit a recorded log, or rerun a recorded session script.
    Replay {
        /// JSON-lines episode log.
        #[arg(long, conflicts_with = "script", required_unless_present = "script")]
        log: Option<PathBuf>,
        /// Command script saved from a live session.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Scenario the log came from; enables the safety audits.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Where to write the log produced from a script.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step CSV for plotting.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Serve a live session over WebSocket.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        #[arg(long, default_value_t = 30.0)]
        snapshot_hz: f64,
        /// Rate limit for dragged obstacles (m/s).
        #[arg(long, default_value_t = stt_server::session::DEFAULT_MAX_DRAG_SPEED)]
        max_drag_speed: f64,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

enum Failure {
    /// Configuration, validation or I/O problem.
    Config(String),
    /// The run completed but the task was not achieved.
    Task(String),
}

impl From<stt_core::Error> for Failure {
    fn from(e: stt_core::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load_scenario(a: &ScenarioArgs) -> Result<Scenario, Failure> {
    let sc = Scenario::load(&a.scenario)?;
    Ok(sc.with_overrides(Overrides { seed: a.seed, dt: a.dt })?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn write_csv(rows: &[stt_core::sim::StepRecord], path: &Path) -> Result<(), Failure> {
    let mut w = create(path)?;
    write_rows_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_log(log: &EpisodeLog, path: &Path) -> Result<(), Failure> {
    let mut w = create(path)?;
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn summarize(log: &EpisodeLog, sc: &Scenario) -> Result<(), Failure> {
    let m = compute_metrics(log);
    let a = audit(&log.rows, log.dt, &AuditLimits::for_scenario(sc));
    let residual = radius_ode_residual(&log.rows, sc.tube.rho_max, sc.tube.nu);
    println!("status        {:?}", log.status);
    println!("final error   {:.4} m", m.final_error);
    println!("path length   {:.3} m", m.path_length);
    match m.min_clearance {
        Some(c) => println!("min clearance {c:.4} m"),
        None => println!("min clearance -"),
    }
    println!("tick compute  {:.2} us (sd {:.2})", m.compute_time_mean_ms * 1e3, m.compute_time_sd_ms * 1e3);
    println!(
        "audit         {} (containment {}, disjointness {}, radius {}, continuity {}, funnel {}, clamps {}, rho residual {residual:.1e})",
        if a.passed() { "pass" } else { "FAIL" },
        a.containment,
        a.disjointness,
        a.radius_bounds,
        a.continuity,
        a.funnel,
        a.clamp_events
    );
    Ok(())
}

fn task_outcome(status: Status) -> Result<(), Failure> {
    match status {
        Status::Success => Ok(()),
        s => Err(Failure::Task(format!("episode ended with status {s:?}"))),
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.verb {
        Verb::Run { scenario, disturbance, out, out_csv } => {
            let mut sc = load_scenario(&scenario)?;
            if let Some(b) = disturbance {
                let mut file = sc.source.clone();
                file.disturbance.bound = b;
                sc = Scenario::from_file(file)?;
            }
            let log = run_episode(&sc, RunOptions { force: scenario.force, ..Default::default() })?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", sc.name)));
            write_log(&log, &out)?;
            if let Some(p) = out_csv {
                write_csv(&log.rows, &p)?;
            }
            summarize(&log, &sc)?;
            println!("log           {}", out.display());
            task_outcome(log.status)
        }
        Verb::Bench { spec, workers, seed, dt, out, no_timing } => {
            let text = match std::fs::read_to_string(&spec) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    let name = spec.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    bundled_bench_spec(name)
                        .ok_or_else(|| Failure::Config(format!("no bench spec at {}", spec.display())))?
                        .to_string()
                }
                Err(e) => return Err(e.into()),
            };
            let mut spec = BenchSpec::from_json(&text)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            if dt.is_some() {
                spec.dt = dt;
            }
            let report = run_bench(&spec, workers, !no_timing)?;
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            w.write_all(b"\n")?;
            w.flush()?;
            print!("{}", report.table());
            println!("report written to {}", out.display());
            Ok(())
        }
        Verb::Validate { scenario } => {
            let sc = load_scenario(&scenario)?;
            let report = sc.validate();
            for f in &report.violations {
                println!("violation {}: {}", f.code, f.message);
            }
            for f in &report.notes {
                println!("note {}: {}", f.code, f.message);
            }
            if report.ok {
                println!("{}: ok", sc.name);
                Ok(())
            } else {
                Err(Failure::Config(format!("{}: {} violation(s)", sc.name, report.violations.len())))
            }
        }
        Verb::Replay { log, script, scenario, out, out_csv } => {
            if let Some(path) = script {
                let script: CommandScript = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
                let sc = Scenario::from_file(script.scenario.clone())?;
                let log = replay(&script, SessionConfig { force: true, ..Default::default() })
                    .map_err(|e| Failure::Config(e.to_string()))?;
                if let Some(p) = &out {
                    write_log(&log, p)?;
                }
                if let Some(p) = &out_csv {
                    write_csv(&log.rows, p)?;
                }
                summarize(&log, &sc)?;
                return task_outcome(log.status);
            }
            let path = log.expect("clap enforces --log or --script");
            let rows = EpisodeLog::read_jsonl(BufReader::new(File::open(&path)?))?;
            if rows.is_empty() {
                return Err(Failure::Config(format!("{} has no rows", path.display())));
            }
            println!("rows          {}", rows.len());
            let events: usize = rows.iter().map(|r| r.events.len()).sum();
            println!("events        {events}");
            if let Some(p) = scenario {
                let sc = Scenario::load(&p)?;
                let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { sc.dt };
                let a = audit(&rows, dt, &AuditLimits::for_scenario(&sc));
                println!(
                    "audit         {} (containment {}, disjointness {}, radius {}, continuity {}, funnel {})",
                    if a.passed() { "pass" } else { "FAIL" },
                    a.containment,
                    a.disjointness,
                    a.radius_bounds,
                    a.continuity,
                    a.funnel
                );
            }
            if let Some(p) = out_csv {
                write_csv(&rows, &p)?;
                println!("csv           {}", p.display());
            }
            Ok(())
        }
        Verb::Serve { scenario, addr, time_scale, snapshot_hz, max_drag_speed } => {
            let sc = load_scenario(&scenario)?;
            let cfg = ServerConfig {
                session: SessionConfig { max_drag_speed, force: scenario.force },
                time_scale,
                snapshot_hz,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                println!("serving {} on ws://{}/session", sc.name, listener.local_addr()?);
                stt_server::serve(listener, sc, cfg).await
            })?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STT_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Task(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
