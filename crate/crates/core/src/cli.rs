//! Command-line front end: `run`, `attack`, `report` and `keys`.
//!
//! Every command reads a TOML file carrying `schema = 1` and one section:
//!
//! ```toml
//! schema = 1
//! run_types = ["standard", "blindfl"]   # optional, `run` only
//!
//! [federation]                          # `run` and `keys`
//! clients = 10
//! selected = 10
//! fhe = "ckks"
//!
//! [attack]                              # `attack`
//! widths = [64, 32, 16, 10]
//! trials = 15
//! seed = 1
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input error.
//! Configuration is fully parsed and validated before anything is written.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{run_sweep, write_sweep_csv, AttackConfig};
use crate::fhe::codec::{serialize_public_key, serialize_secret_key};
use crate::fhe::{Backend, RoundId};
use crate::runtime::{run_experiment_with, FederationConfig, FheMode, MetricsRow, MetricsWriter, RoundMetrics, METRICS_COLUMNS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "blindfl", version, about = "Segmented, encrypted federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Zero all wall-time columns so outputs are byte-reproducible.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a federated experiment and write metrics.
    Run,
    /// Sweep layer-subset attacks and write a report.
    Attack,
    /// Compare metrics files side by side.
    Report {
        /// Metrics CSV files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Generate one key pair for the configured parameters.
    Keys,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// The four experiment variants: encryption and segmentation each on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunType {
    Standard,
    Fhe,
    Cms,
    Blindfl,
}

impl RunType {
    pub fn name(self) -> &'static str {
        match self {
            RunType::Standard => "standard",
            RunType::Fhe => "fhe",
            RunType::Cms => "cms",
            RunType::Blindfl => "blindfl",
        }
    }

    /// `base` with this variant's switches applied. Encrypted variants keep
    /// the configured scheme, or use CKKS when the base has encryption off.
    pub fn apply(self, base: &FederationConfig) -> FederationConfig {
        let scheme = match base.fhe {
            FheMode::Off => FheMode::Ckks,
            other => other,
        };
        let (fhe, segmentation) = match self {
            RunType::Standard => (FheMode::Off, false),
            RunType::Fhe => (scheme, false),
            RunType::Cms => (FheMode::Off, true),
            RunType::Blindfl => (scheme, true),
        };
        FederationConfig {
            fhe,
            segmentation,
            ..base.clone()
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema: u32,
    #[serde(default)]
    run_types: Option<Vec<RunType>>,
    #[serde(default)]
    federation: Option<FederationConfig>,
    #[serde(default)]
    attack: Option<AttackConfig>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    let path = path.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let file: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if file.schema != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "{}: schema {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            file.schema
        )));
    }
    Ok(file)
}

fn out_dir(cli: &Cli) -> Result<&Path, CliError> {
    cli.out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out is required".into()))
}

fn federation(cli: &Cli, file: &ConfigFile) -> Result<FederationConfig, CliError> {
    let mut config = file
        .federation
        .clone()
        .ok_or_else(|| CliError::Config("missing [federation] section".into()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.deterministic |= cli.deterministic;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Totals written to `summary.json` for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_type: Option<RunType>,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub mean_agg_time_ms: f64,
}

impl RunSummary {
    pub fn from_metrics(run_type: Option<RunType>, metrics: &[RoundMetrics]) -> Self {
        let rounds = metrics.len();
        Self {
            run_type,
            rounds,
            final_accuracy: metrics.last().map_or(0.0, |m| m.mean_accuracy),
            total_bytes_up: metrics.iter().flat_map(|m| &m.bytes_up).sum(),
            total_bytes_down: metrics.iter().flat_map(|m| &m.bytes_down).sum(),
            mean_agg_time_ms: if rounds == 0 {
                0.0
            } else {
                metrics.iter().map(|m| m.agg_time_ms).sum::<f64>() / rounds as f64
            },
        }
    }
}

fn cmd_run(cli: &Cli) -> Result<(), CliError> {
    let file = load_config(cli.config.as_deref())?;
    let base = federation(cli, &file)?;
    let out = out_dir(cli)?;
    let plans: Vec<(Option<RunType>, FederationConfig, String)> = match &file.run_types {
        None => vec![(None, base, "metrics.csv".into())],
        Some(types) if types.is_empty() => return Err(CliError::Config("run_types is empty".into())),
        Some(types) => types
            .iter()
            .map(|t| (Some(*t), t.apply(&base), format!("metrics_{}.csv", t.name())))
            .collect(),
    };
    for (_, config, _) in &plans {
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    fs::create_dir_all(out).map_err(runtime)?;
    let mut summaries = Vec::new();
    for (run_type, config, name) in plans {
        log::info!("running {}", run_type.map_or("experiment", RunType::name));
        let mut writer = MetricsWriter::new(BufWriter::new(File::create(out.join(&name)).map_err(runtime)?)).map_err(runtime)?;
        let mut write_error = None;
        let result = run_experiment_with(config, |m| {
            if let Err(e) = writer.push(m) {
                write_error.get_or_insert(e);
            }
        });
        if let Some(e) = write_error {
            return Err(runtime(e));
        }
        let metrics = result.map_err(runtime)?;
        summaries.push(RunSummary::from_metrics(run_type, &metrics));
    }
    let json = if summaries.len() == 1 {
        serde_json::to_string_pretty(&summaries[0])
    } else {
        serde_json::to_string_pretty(&summaries)
    }
    .map_err(runtime)?;
    fs::write(out.join("summary.json"), json + "\n").map_err(runtime)?;
    Ok(())
}

fn cmd_attack(cli: &Cli) -> Result<(), CliError> {
    let file = load_config(cli.config.as_deref())?;
    let mut config = file
        .attack
        .ok_or_else(|| CliError::Config("missing [attack] section".into()))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = out_dir(cli)?;
    let rows = run_sweep(&config).map_err(runtime)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let f = File::create(out.join("attack_report.csv")).map_err(runtime)?;
    write_sweep_csv(&rows, BufWriter::new(f)).map_err(runtime)?;
    Ok(())
}

fn cmd_keys(cli: &Cli) -> Result<(), CliError> {
    let file = load_config(cli.config.as_deref())?;
    let config = federation(cli, &file)?;
    let params = config
        .fhe_params()
        .ok_or_else(|| CliError::Config("keys need fhe = \"oracle\" or \"ckks\"".into()))?;
    let out = out_dir(cli)?;
    let backend = Backend::new(params).map_err(|e| CliError::Config(e.to_string()))?;
    let keys = backend
        .keygen(&mut ChaCha20Rng::seed_from_u64(config.seed), RoundId(1))
        .map_err(runtime)?;
    fs::create_dir_all(out).map_err(runtime)?;
    let public = serialize_public_key(&keys.public);
    let secret = serialize_secret_key(&keys.secret);
    fs::write(out.join("public.key"), &public).map_err(runtime)?;
    fs::write(out.join("secret.key"), &secret).map_err(runtime)?;
    println!("public key: {} bytes\nsecret key: {} bytes", public.len(), secret.len());
    Ok(())
}

/// Per-file aggregates shown by `report`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub name: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub mean_agg_time_ms: f64,
    pub mean_bytes_up: f64,
}

/// Reads a metrics CSV, rejecting foreign or ragged layouts.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let headers = reader.headers().map_err(|e| bad(&e))?.clone();
    if headers.iter().ne(METRICS_COLUMNS) {
        return Err(bad(&format!("columns {:?} do not match the metrics schema", headers.iter().collect::<Vec<_>>())));
    }
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .map_err(|e| bad(&e))
}

pub fn report_line(name: String, rows: &[MetricsRow]) -> ReportLine {
    let n = rows.len().max(1) as f64;
    ReportLine {
        name,
        rounds: rows.len(),
        final_accuracy: rows.last().map_or(0.0, |r| r.mean_accuracy),
        mean_agg_time_ms: rows.iter().map(|r| r.agg_time_ms).sum::<f64>() / n,
        mean_bytes_up: rows.iter().map(|r| r.bytes_up_mean).sum::<f64>() / n,
    }
}

pub fn format_report(lines: &[ReportLine]) -> String {
    let width = lines.iter().map(|l| l.name.len()).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>9}  {:>12}  {:>14}\n",
        "run", "rounds", "accuracy", "agg_ms", "bytes_up_mean"
    );
    for l in lines {
        out += &format!(
            "{:<width$}  {:>6}  {:>9.4}  {:>12.3}  {:>14.1}\n",
            l.name, l.rounds, l.final_accuracy, l.mean_agg_time_ms, l.mean_bytes_up
        );
    }
    out
}

fn cmd_report(cli: &Cli, files: &[PathBuf]) -> Result<(), CliError> {
    let lines = files
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(report_line(name, &read_metrics(p)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let table = format_report(&lines);
    print!("{table}");
    if let Some(out) = &cli.out {
        fs::create_dir_all(out).map_err(runtime)?;
        fs::write(out.join("report.txt"), &table).map_err(runtime)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run => cmd_run(cli),
        Command::Attack => cmd_attack(cli),
        Command::Report { files } => cmd_report(cli, files),
        Command::Keys => cmd_keys(cli),
    }
}

/// Parses `std::env::args`, runs the command and maps the outcome to an
/// exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(command: Command, config: Option<PathBuf>, out: Option<PathBuf>) -> Cli {
        Cli {
            command,
            config,
            out,
            seed: None,
            deterministic: true,
            verbose: false,
        }
    }

    const SMALL: &str = r#"
        schema = 1
        [federation]
        clients = 3
        selected = 2
        rounds = 2
        fhe = "oracle"
        hidden = [4]
        dataset = { kind = "blobs", samples = 60, classes = 3, features = 4, spread = 1.0 }
    "#;

    #[test]
    fn flags_parse() {
        let c = Cli::try_parse_from(["blindfl", "run", "--config", "a.toml", "--out", "o", "--seed", "5", "--deterministic"]).unwrap();
        assert!(matches!(c.command, Command::Run));
        assert_eq!(c.seed, Some(5));
        assert!(Cli::try_parse_from(["blindfl"]).is_err());
        assert!(Cli::try_parse_from(["blindfl", "report"]).is_err());
    }

    #[test]
    fn run_writes_metrics_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, SMALL).unwrap();
        let out = dir.path().join("out");
        execute(&cli(Command::Run, Some(cfg), Some(out.clone()))).unwrap();
        let rows = read_metrics(&out.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        let summary: RunSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.rounds, 2);
        assert_eq!(summary.mean_agg_time_ms, 0.0);
    }

    #[test]
    fn malformed_config_is_exit_2_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, SMALL.replace("rounds = 2", "roundz = 2")).unwrap();
        let out = dir.path().join("out");
        let err = execute(&cli(Command::Run, Some(cfg.clone()), Some(out.clone()))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!out.exists());
        fs::write(&cfg, SMALL.replace("schema = 1", "schema = 9")).unwrap();
        assert_eq!(execute(&cli(Command::Run, Some(cfg), Some(out.clone()))).unwrap_err().exit_code(), 2);
        assert!(!out.exists());
    }

    #[test]
    fn report_rejects_foreign_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert_eq!(read_metrics(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn run_types_switch_modes() {
        let base = FederationConfig::default();
        let std = RunType::Standard.apply(&base);
        assert_eq!((std.fhe, std.segmentation), (FheMode::Off, false));
        let b = RunType::Blindfl.apply(&FederationConfig {
            fhe: FheMode::Off,
            ..base
        });
        assert_eq!((b.fhe, b.segmentation), (FheMode::Ckks, true));
    }
}
