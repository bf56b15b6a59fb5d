//! Command-line driver: `index`, `run`, `eval` and `report`.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groundgen::evaluation::ReportFormat;
use groundgen::{GroundingMode, RougeVariant};
use serde_json::Value;
use tracing::level_filters::LevelFilter;

use crate::commands::CliError;
use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "groundgen", version, about = "Evolve grounded answers from retrieved passages")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the BM25 index for the configured corpus.
    Index(ConfigArgs),
    /// Retrieve seeds and evolve an answer for every query.
    Run(ConfigArgs),
    /// Verify and compare final answers; write report.{json,tsv,md}.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trace directory (default: <output_dir>/traces).
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Merge report.json files into one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        log: LogArgs,
    },
}

#[derive(Debug, Args)]
pub struct LogArgs {
    /// More log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

/// Each flag sets the config key named in its help text.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Set any config key: `--set evolution.top_d=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// corpus
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// queries
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// output_dir
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// index
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// sidecar_url
    #[arg(long)]
    pub sidecar_url: Option<String>,
    /// backend.kind (http, extractive_mock, noisy_mock, identity_mock)
    #[arg(long)]
    pub backend: Option<String>,
    /// backend.hallucination_rate
    #[arg(long)]
    pub hallucination_rate: Option<f64>,
    /// retrieval.first_k
    #[arg(long)]
    pub first_k: Option<usize>,
    /// retrieval.seed_count
    #[arg(long)]
    pub seed_count: Option<usize>,
    /// evolution.lambda
    #[arg(long)]
    pub lambda: Option<f64>,
    /// evolution.variant
    #[arg(long)]
    pub variant: Option<RougeVariant>,
    /// evolution.grounding_mode
    #[arg(long)]
    pub grounding_mode: Option<GroundingMode>,
    /// evolution.max_iterations
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// evolution.rng_seed
    #[arg(long)]
    pub rng_seed: Option<u64>,
    /// evaluation.method
    #[arg(long)]
    pub method: Option<String>,
    /// evaluation.epsilon
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// parallelism
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub log: LogArgs,
}

impl ConfigArgs {
    /// Named flags first, then `--set` in the order given.
    pub fn overrides(&self) -> Result<Vec<(String, Value)>, ConfigError> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut put = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        put("corpus", path(&self.corpus));
        put("queries", path(&self.queries));
        put("output_dir", path(&self.output_dir));
        put("index", path(&self.index));
        put("sidecar_url", self.sidecar_url.clone().map(Value::String));
        put("backend.kind", self.backend.clone().map(Value::String));
        put("backend.hallucination_rate", self.hallucination_rate.map(Value::from));
        put("retrieval.first_k", self.first_k.map(Value::from));
        put("retrieval.seed_count", self.seed_count.map(Value::from));
        put("evolution.lambda", self.lambda.map(Value::from));
        put("evolution.variant", self.variant.map(|v| Value::String(v.to_string())));
        put("evolution.grounding_mode", self.grounding_mode.map(|m| serde_json::to_value(m).expect("enum serializes")));
        put("evolution.max_iterations", self.max_iterations.map(Value::from));
        put("evolution.rng_seed", self.rng_seed.map(Value::from));
        put("evaluation.method", self.method.clone().map(Value::String));
        put("evaluation.epsilon", self.epsilon.map(Value::from));
        put("parallelism", self.parallelism.map(Value::from));
        for s in &self.set {
            let (key, raw) = s
                .split_once('=')
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ConfigError::Override(s.clone()))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            out.push((key.to_string(), v));
        }
        Ok(out)
    }

    pub fn load(&self) -> Result<RunConfig, ConfigError> {
        RunConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

fn init_logging(log: &LogArgs) {
    let level = match (log.quiet, log.verbose) {
        (true, _) => LevelFilter::WARN,
        (false, 0) => LevelFilter::INFO,
        (false, 1) => LevelFilter::DEBUG,
        _ => LevelFilter::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .json()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Index(args) => {
            init_logging(&args.log);
            commands::cmd_index(&args.load()?)
        }
        Command::Run(args) => {
            init_logging(&args.log);
            commands::cmd_run(&args.load()?)
        }
        Command::Eval { config, traces } => {
            init_logging(&config.log);
            commands::cmd_eval(&config.load()?, traces.as_deref())
        }
        Command::Report { reports, format, out, log } => {
            init_logging(&log);
            commands::cmd_report(&reports, format, out.as_deref())
        }
    }
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
