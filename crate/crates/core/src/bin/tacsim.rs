use std::fs::File;
use std::io::BufReader;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tacsim::config::{default_model, ModelFile};
use tacsim::coordination::Mode;
use tacsim::kinematics::RobotModel;
use tacsim::metrics::{read_trials_csv, write_trials_csv};
use tacsim::operator::{InputTrace, OperatorModel};
use tacsim::server::{serve, ServeOptions, ServerSession, DEFAULT_LISTEN, LISTEN_ENV};
use tacsim::sim::{
    analyze, batch_seed, replay_trace, run_batch, write_pairwise_csv, write_stats_csv, BatchReport, MetricComparison,
    OperatorSource, SessionConfig,
};
use tacsim::task::TaskFile;

#[derive(Parser)]
#[command(name = "tacsim", version, about = "Torso-arm coordination teleoperation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Task file (TOML shelf + script); the built-in task when omitted.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Simulation tick rate, 50 or 100 Hz.
    #[arg(long = "ticks-hz")]
    ticks_hz: Option<u32>,
    /// Synthetic operator parameters (TOML); the reference operator when omitted.
    #[arg(long = "operator-profile")]
    operator_profile: Option<PathBuf>,
    /// Robot description (TOML); the built-in lift + arm when omitted.
    #[arg(long)]
    robot: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Serve one interactive session over WebSocket. The listen address is
    /// read from TACSIM_LISTEN (default 127.0.0.1:8765).
    Run {
        #[arg(long, default_value = "V")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for finished trial logs and input traces.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run seeded headless trials for each mode and compare them.
    Batch {
        /// Comma-separated modes; all seven when omitted.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<Mode>,
        /// Base seed; trial k uses seed + k.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Output directory for trials.csv, stats.csv, pairwise.csv,
        /// summary.json and per-trial logs.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a recorded input trace and print its metrics.
    Replay {
        trace: PathBuf,
        /// Mode to replay in; must match the trace.
        #[arg(long)]
        mode: Option<Mode>,
        /// Write the reproduced trial log here (.gz for compression).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute statistics from a trials.csv produced by `batch`.
    Analyze {
        input: PathBuf,
        /// Directory for stats.csv, pairwise.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

type Result<T> = std::result::Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("reading {}: {e}", path.display())))
}

fn load_model(common: &Common) -> Result<RobotModel> {
    match &common.robot {
        None => Ok(default_model()),
        Some(p) => ModelFile::load(p).and_then(|f| f.model()).map_err(config_err),
    }
}

fn session_config(model: &RobotModel, mode: Mode, seed: u64, common: &Common) -> Result<SessionConfig> {
    let mut cfg = SessionConfig::new(model, mode, seed);
    if let Some(hz) = common.ticks_hz {
        cfg.tick_hz = hz;
    }
    if let Some(p) = &common.task {
        let file = TaskFile::parse(&read_text(p)?).map_err(config_err)?;
        cfg.shelf = file.shelf;
        cfg.script = file.script;
    }
    if let Some(p) = &common.operator_profile {
        let mut op = OperatorModel::parse_toml(&read_text(p)?).map_err(config_err)?;
        op.seed = seed;
        cfg.operator = OperatorSource::Synthetic(op);
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn print_comparisons(comparisons: &[MetricComparison]) {
    for c in comparisons {
        let medians: Vec<String> = c.medians.iter().map(|(m, v)| format!("{m}={v:.4}")).collect();
        println!(
            "{:<22} H={:8.3} p={:.3e}  {}",
            c.metric,
            c.test.h,
            c.test.p,
            medians.join(" ")
        );
    }
}

fn write_tables(dir: &Path, report: &BatchReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(runtime_err)?;
    let create = |name: &str| File::create(dir.join(name)).map_err(|e| runtime_err(format!("{name}: {e}")));
    write_trials_csv(create("trials.csv")?, &report.rows).map_err(runtime_err)?;
    write_stats_csv(create("stats.csv")?, &report.comparisons).map_err(runtime_err)?;
    write_pairwise_csv(create("pairwise.csv")?, &report.modes, &report.comparisons).map_err(runtime_err)?;
    serde_json::to_writer_pretty(create("summary.json")?, report).map_err(runtime_err)?;
    Ok(())
}

fn cmd_run(mode: Mode, seed: u64, out: Option<PathBuf>, common: &Common) -> Result<()> {
    let model = load_model(common)?;
    let cfg = session_config(&model, mode, seed, common)?;
    let addr = std::env::var(LISTEN_ENV).unwrap_or_else(|_| DEFAULT_LISTEN.to_string());
    let session = ServerSession::new(model, cfg, ServeOptions { out_dir: out }).map_err(config_err)?;
    let listener = TcpListener::bind(&addr).map_err(|e| Failure::Config(format!("binding {addr}: {e}")))?;
    eprintln!("listening on ws://{}", listener.local_addr().map_err(runtime_err)?);
    serve(listener, session).map_err(runtime_err)
}

fn cmd_batch(modes: Vec<Mode>, seed: u64, trials: usize, out: PathBuf, common: &Common) -> Result<()> {
    if trials == 0 {
        return Err(Failure::Config("--trials must be at least 1".into()));
    }
    let modes = if modes.is_empty() { Mode::ALL.to_vec() } else { modes };
    let model = load_model(common)?;
    let mut cfg = session_config(&model, modes[0], seed, common)?;
    let logs = out.join("logs");
    std::fs::create_dir_all(&logs).map_err(runtime_err)?;
    cfg.log_path = Some(logs);
    let seeds: Vec<u64> = (0..trials).map(|k| batch_seed(seed, k)).collect();
    let report = run_batch(&model, &cfg, &modes, &seeds).map_err(runtime_err)?;
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("trial {} seed {}: {}", r.mode, r.seed, r.error.as_deref().unwrap_or(""));
    }
    write_tables(&out, &report)?;
    print_comparisons(&report.comparisons);
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_replay(trace_path: &Path, mode: Option<Mode>, out: Option<PathBuf>, common: &Common) -> Result<()> {
    let trace = InputTrace::load(trace_path).map_err(|e| Failure::Config(format!("reading {}: {e}", trace_path.display())))?;
    let model = load_model(common)?;
    let mut common = common.clone();
    common.ticks_hz.get_or_insert(trace.meta.tick_hz);
    let mut cfg = session_config(&model, mode.unwrap_or(trace.meta.mode), trace.meta.seed, &common)?;
    cfg.operator = OperatorSource::Replay(trace_path.to_path_buf());
    cfg.log_path = out;
    let outcome = replay_trace(&model, &cfg, &trace).map_err(|e| match e {
        tacsim::sim::SimError::Trace(_) | tacsim::sim::SimError::Config(_) => config_err(e),
        e => runtime_err(e),
    })?;
    if outcome.partial {
        eprintln!("trace ended before the task was done; metrics are partial");
    }
    println!("{}", serde_json::to_string_pretty(&outcome.metrics).map_err(runtime_err)?);
    Ok(())
}

fn cmd_analyze(input: &Path, out: Option<PathBuf>) -> Result<()> {
    let file = File::open(input).map_err(|e| Failure::Config(format!("reading {}: {e}", input.display())))?;
    let rows = read_trials_csv(BufReader::new(file)).map_err(config_err)?;
    let modes: Vec<Mode> = Mode::ALL.into_iter().filter(|m| rows.iter().any(|r| r.mode == *m)).collect();
    let comparisons = analyze(&rows, &modes).map_err(config_err)?;
    print_comparisons(&comparisons);
    if let Some(dir) = out {
        let trials_per_mode = modes.iter().map(|m| rows.iter().filter(|r| r.mode == *m).count()).max().unwrap_or(0);
        let report = BatchReport {
            modes,
            trials_per_mode,
            rows,
            comparisons,
        };
        write_tables(&dir, &report)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Command::Run { mode, seed, out, common } => cmd_run(mode, seed, out, &common),
        Command::Batch {
            mode,
            seed,
            trials,
            out,
            common,
        } => cmd_batch(mode, seed, trials, out, &common),
        Command::Replay { trace, mode, out, common } => cmd_replay(&trace, mode, out, &common),
        Command::Analyze { input, out } => cmd_analyze(&input, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
