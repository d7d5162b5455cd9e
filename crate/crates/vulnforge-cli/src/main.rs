//! Command-line front end. Every subcommand reads and writes artifacts under
//! one output directory; the library does the actual work.

mod config;
mod stages;

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use vulnforge::attacks::AttackKind;

use crate::config::PipelineConfig;
use crate::stages::DirLock;

#[derive(Parser)]
#[command(
    name = "vulnforge",
    version,
    about = "Build multi-task vulnerability instruction data from patched CVE corpora"
)]
struct Cli {
    /// Pipeline configuration (TOML). Required by every subcommand except demo.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory. Defaults to the config's output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override every stage seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the endpoint base URL from the config.
    #[arg(long, global = true)]
    endpoint: Option<String>,

    /// Replay model responses from a scripted fixture instead of HTTP.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackChoice {
    Mhm,
    Wir,
    Dci,
}

impl From<AttackChoice> for AttackKind {
    fn from(choice: AttackChoice) -> AttackKind {
        match choice {
            AttackChoice::Mhm => AttackKind::Mhm,
            AttackChoice::Wir => AttackKind::Wir,
            AttackChoice::Dci => AttackKind::Dci,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Read the raw corpus, dedup, balance, and split it.
    Ingest,
    /// Extract vulnerability lines and dependency context per record.
    Features {
        /// Also write each record's dependency graph as JSON.
        #[arg(long)]
        emit_pdg: bool,
    },
    /// Run model-verified interpretation over the train split.
    Interpret,
    /// Emit the three-task instruction dataset per split.
    BuildDataset {
        /// Also write prompt-rendered copies of each split.
        #[arg(long)]
        rendered: bool,
    },
    /// Write identifier-renamed training copies.
    Augment,
    /// Attack the test split and record outcomes.
    Attack {
        #[arg(long, value_enum)]
        kind: AttackChoice,
    },
    /// Score detection on a split, clean and under recorded attacks.
    Evaluate {
        /// Which dataset split to score.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the correct-prediction probability histogram.
        #[arg(long)]
        emit_density_csv: bool,
    },
    /// List transcripts awaiting review, or apply a decisions file.
    Review {
        /// Decisions file (edited review queue JSON) to apply.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Run the whole pipeline offline on the bundled corpus.
    Demo,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Command::Demo = cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("vulnforge-demo"));
        let _lock = DirLock::acquire(&out)?;
        return stages::run_demo(&out);
    }

    let config_path = cli
        .config
        .as_deref()
        .context("--config is required (only `demo` runs without one)")?;
    let mut config = PipelineConfig::load(config_path)?;
    let config_text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;

    if let Some(seed) = cli.seed {
        config.seeds.balance = seed;
        config.seeds.split = seed;
        config.seeds.interpret = seed;
        config.seeds.augment = seed;
        config.seeds.attack = seed;
    }
    if let Some(endpoint) = &cli.endpoint {
        config.endpoint.base_url = endpoint.clone();
    }

    let out = cli.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let _lock = DirLock::acquire(&out)?;

    match cli.command {
        Command::Ingest => stages::run_ingest(&config, &config_text, &out),
        Command::Features { emit_pdg } => {
            stages::run_features(&config, &config_text, &out, emit_pdg)
        }
        Command::Interpret => {
            let client = stages::make_client(&config.endpoint, cli.mock.as_deref())?;
            stages::run_interpret(&config, &config_text, &out, &client)
        }
        Command::BuildDataset { rendered } => {
            stages::run_build_dataset(&config, &config_text, &out, rendered)
        }
        Command::Augment => stages::run_augment(&config, &config_text, &out),
        Command::Attack { kind } => {
            let client = stages::make_client(&config.endpoint, cli.mock.as_deref())?;
            stages::run_attack(&config, &config_text, &out, kind.into(), &client)
        }
        Command::Evaluate { split, emit_density_csv } => {
            if !["train", "validation", "test"].contains(&split.as_str()) {
                bail!("--split must be train, validation, or test");
            }
            let client = stages::make_client(&config.endpoint, cli.mock.as_deref())?;
            stages::run_evaluate(&config, &config_text, &out, &split, emit_density_csv, &client)
        }
        Command::Review { apply } => stages::run_review(&config_text, &out, apply.as_deref()),
        Command::Demo => unreachable!("handled above"),
    }
}
