mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use servonet::dataset::{self, DatasetConfig, DatasetError};
use servonet::estimator::{CorruptionSchedule, EstimatorError, OracleServer, ServerConfig};
use servonet::report::write_report;
use servonet::scene::{SceneConfig, SceneError};
use servonet::sim::{self, LogError, Outcome, RunSummary, Scenario, SimError};

use config::ConfigError;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;
const EXIT_DIVERGED: u8 = 5;
const EXIT_ESTIMATOR: u8 = 6;

const LOSS_FIXTURE_CASES: usize = 1000;

#[derive(Parser)]
#[command(name = "servonet", version, about = "Pose-regression visual servoing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a training dataset (images + manifest.jsonl)
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        /// key=value, dotted keys reach into nested objects
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads (default: logical cores)
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run one closed-loop servoing experiment
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Serve the estimator protocol from ground truth
    ServeOracle {
        /// Optional JSON with `scene`, `schedule` and `name`
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 7700)]
        port: u16,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Plot an experiment log
    Report {
        /// Log CSV written by `run`
        log: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Check a manifest, scenario or dataset config
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        // an unreadable config file is still a configuration problem
        Failure::new(EXIT_CONFIG, e)
    }
}

fn dataset_failure(e: DatasetError) -> Failure {
    Failure::new(if e.is_io() { EXIT_IO } else { EXIT_CONFIG }, e)
}

fn sim_failure(e: SimError) -> Failure {
    let code = match &e {
        SimError::Estimator(EstimatorError::NoGroundTruth) | SimError::Config(_) | SimError::Perturb(_) => EXIT_CONFIG,
        SimError::Estimator(_) => EXIT_ESTIMATOR,
        SimError::Scene(SceneError::Image(_)) => EXIT_IO,
        SimError::Scene(SceneError::Render(_)) => EXIT_CONFIG,
    };
    Failure::new(code, e)
}

fn log_failure(e: LogError) -> Failure {
    match e {
        LogError::Io { .. } => Failure::new(EXIT_IO, e),
        _ => Failure::new(EXIT_CONFIG, e),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_dataset(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    overrides: &[String],
    workers: Option<usize>,
) -> Result<u8, Failure> {
    let cfg: DatasetConfig = config::load(config, overrides, seed)?;
    let started = Instant::now();
    let manifest =
        dataset::build_dataset(&cfg, &base_dir(config), out, workers.unwrap_or(0)).map_err(dataset_failure)?;
    dataset::write_loss_fixture(&out.join("loss_fixture.json"), LOSS_FIXTURE_CASES, cfg.seed)
        .map_err(dataset_failure)?;
    println!(
        "{} samples written to {} in {:.1} s",
        manifest.samples.len(),
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct RunReport<'a> {
    outcome: &'a Outcome,
    summary: &'a RunSummary,
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path, overrides: &[String]) -> Result<u8, Failure> {
    let scenario: Scenario = config::load(config, overrides, seed)?;
    let log = sim::run_experiment(&scenario, &base_dir(config)).map_err(sim_failure)?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    sim::export_csv(&log.records, &out.join("log.csv")).map_err(log_failure)?;
    let summary = sim::summarize(&log.records).map_err(log_failure)?;
    let json = serde_json::to_string_pretty(&RunReport {
        outcome: &log.outcome,
        summary: &summary,
    })
    .expect("summary serializes");
    let path = out.join("summary.json");
    std::fs::write(&path, json + "\n").map_err(|e| io_failure(&path, e))?;
    let (code, word) = match log.outcome {
        Outcome::Converged { .. } => (EXIT_OK, "converged"),
        Outcome::MaxIterationsReached => (EXIT_NOT_CONVERGED, "not converged"),
        Outcome::Diverged { .. } => (EXIT_DIVERGED, "diverged"),
        Outcome::EstimatorUnavailable { .. } => (EXIT_ESTIMATOR, "estimator unavailable"),
    };
    println!(
        "{word} after {} iterations: {:.4} mm, {:.4} deg",
        summary.iterations,
        summary.final_translation_error_m * 1e3,
        summary.final_rotation_error_deg
    );
    Ok(code)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OracleServiceConfig {
    #[serde(default)]
    scene: Option<SceneConfig>,
    #[serde(default)]
    schedule: CorruptionSchedule,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    seed: u64,
}

fn cmd_serve_oracle(config: Option<&Path>, seed: Option<u64>, port: u16, overrides: &[String]) -> Result<u8, Failure> {
    let cfg: OracleServiceConfig = match config {
        Some(path) => config::load(path, overrides, seed)?,
        None => OracleServiceConfig {
            seed: seed.unwrap_or(0),
            ..Default::default()
        },
    };
    cfg.schedule.validate().map_err(|e| Failure::new(EXIT_CONFIG, e))?;
    let reference_sha256 = match &cfg.scene {
        Some(scene) => {
            let dir = config.map(base_dir).unwrap_or_default();
            let built = scene.build(&dir).map_err(|e| match e {
                SceneError::Image(_) => Failure::new(EXIT_IO, e),
                SceneError::Render(_) => Failure::new(EXIT_CONFIG, e),
            })?;
            Some(built.reference_image().sha256_hex())
        }
        None => None,
    };
    let mut server_cfg = ServerConfig {
        schedule: cfg.schedule,
        seed: cfg.seed,
        reference_sha256,
        ..ServerConfig::default()
    };
    if let Some(name) = cfg.name {
        server_cfg.name = name;
    }
    let addr = format!("127.0.0.1:{port}");
    let server =
        OracleServer::bind(&addr, server_cfg).map_err(|e| Failure::new(EXIT_IO, format!("cannot bind {addr}: {e}")))?;
    let local = server.local_addr().map_err(|e| Failure::new(EXIT_IO, e))?;
    println!("listening on {local}");
    let _ = std::io::stdout().flush();
    server.serve().map_err(|e| Failure::new(EXIT_IO, e))?;
    Ok(EXIT_OK)
}

fn cmd_report(log: &Path, out: &Path) -> Result<u8, Failure> {
    let records = sim::read_csv(log).map_err(log_failure)?;
    let files = write_report(&records, out).map_err(log_failure)?;
    println!("wrote {} to {}", files.join(", "), out.display());
    Ok(EXIT_OK)
}

fn cmd_validate(config: &Path, overrides: &[String]) -> Result<u8, Failure> {
    if config.extension().is_some_and(|e| e == "jsonl") {
        let manifest = dataset::read_manifest(config).map_err(dataset_failure)?;
        let report = manifest.validate(Some(&base_dir(config))).map_err(dataset_failure)?;
        println!("manifest ok: {report}");
        return Ok(EXIT_OK);
    }
    let mut value = config::read_json(config)?;
    for o in overrides {
        config::apply_override(&mut value, o)?;
    }
    let is_scenario = value.get("initial_offset").is_some();
    if is_scenario {
        let s: Scenario = config::decode(value, "scenario")?;
        s.validate().map_err(sim_failure)?;
        println!("scenario ok");
    } else {
        let d: DatasetConfig = config::decode(value, "dataset config")?;
        d.validate().map_err(dataset_failure)?;
        println!("dataset config ok: {} samples", d.coarse.count + d.fine.count);
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dataset {
            config,
            seed,
            out,
            overrides,
            workers,
        } => cmd_dataset(config, *seed, out, overrides, *workers),
        Command::Run {
            config,
            seed,
            out,
            overrides,
        } => cmd_run(config, *seed, out, overrides),
        Command::ServeOracle {
            config,
            seed,
            port,
            overrides,
        } => cmd_serve_oracle(config.as_deref(), *seed, *port, overrides),
        Command::Report { log, out } => cmd_report(log, out),
        Command::Validate { config, overrides } => cmd_validate(config, overrides),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
