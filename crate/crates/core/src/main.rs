use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use llm_corrector::app::{self, Status};
use llm_corrector::config::AppConfig;
use llm_corrector::ingest::Split;
use llm_corrector::prompt::PromptKind;
use llm_corrector::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "llm-corrector",
    version,
    about = "Refine ML predictions with retrieved context and an LLM corrector"
)]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    split: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    no_self_correction: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the knowledge database from train/valid molecules.
    BuildDb {
        /// Replace an existing database even if its embedder differs.
        #[arg(long)]
        force: bool,
    },
    /// Correct the model's predictions on a split.
    Correct,
    /// Predict directly with a predictor prompt (ip, ipd, ie, ied, fs).
    Predict {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Run an ablation sweep: k, strategy, embedder or self-correction.
    Ablate {
        #[arg(long)]
        axis: String,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
        .map_err(|t| Error::Config(format!("unknown split {t:?} (train|valid|test)")))
}

fn build_config(cli: &Cli) -> Result<AppConfig> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    if let Some(s) = &cli.strategy {
        cfg.set("strategy", s)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &cli.backend {
        cfg.set("backend", b)?;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if cli.no_self_correction {
        cfg.self_correction = false;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Status> {
    let cfg = build_config(cli)?;
    let split = |default: Split| cli.split.as_deref().map_or(Ok(default), parse_split);
    match &cli.command {
        Command::BuildDb { force } => app::cmd_build_db(&cfg, *force),
        Command::Correct => app::cmd_correct(&cfg, split(Split::Test)?),
        Command::Predict { prompt, shots } => {
            let kind = match (prompt.to_ascii_lowercase().as_str(), shots) {
                ("fs", Some(k)) => PromptKind::FewShot(*k),
                ("fs", None) => return Err(Error::Config("--prompt fs needs --shots <k>".into())),
                (other, _) => other.parse()?,
            };
            app::cmd_predict(&cfg, kind, split(Split::Test)?)
        }
        Command::Ablate { axis } => app::cmd_ablate(&cfg, axis, split(Split::Valid)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Status::Failure as u8)
        }
    }
}
