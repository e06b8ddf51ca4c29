mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lvef_core::cohort::Split;
use lvef_core::features::ModalitySubset;
use serde_json::json;

use crate::commands::Layout;
use crate::config::Config;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "lvef", version, about = "Four-class LVEF estimation from ECG and EHR data")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Ecg,
    Ehr,
    Multimodal,
    All,
}

impl ModalityArg {
    fn subsets(self) -> Vec<ModalitySubset> {
        match self {
            ModalityArg::Ecg => vec![ModalitySubset::EcgOnly],
            ModalityArg::Ehr => vec![ModalitySubset::EhrOnly],
            ModalityArg::Multimodal => vec![ModalitySubset::Multimodal],
            ModalityArg::All => ModalitySubset::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CohortArg {
    Internal,
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of records, echos and EHR snapshots.
    Synth,
    /// Filter every record.
    Preprocess,
    /// Compute per-record ECG features.
    Extract,
    /// Pair records with echos, split, and assemble the feature matrix.
    Cohort,
    Train {
        #[arg(long, value_enum, default_value = "all")]
        modality: ModalityArg,
    },
    Evaluate {
        #[arg(long, value_enum, default_value = "internal")]
        cohort: CohortArg,
        #[arg(long, value_enum, default_value = "all")]
        modality: ModalityArg,
        /// Evaluate this model file instead of the trained one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    Explain {
        #[arg(long, value_enum, default_value = "all")]
        modality: ModalityArg,
    },
    /// Collect evaluation reports into tables.
    Report,
}

fn load_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cfg.out_dir);
    match &cli.command {
        Command::Synth => commands::synth(&cfg, &layout),
        Command::Preprocess => commands::preprocess(&cfg, &layout),
        Command::Extract => commands::extract(&cfg, &layout),
        Command::Cohort => commands::cohort(&cfg, &layout),
        Command::Train { modality } => commands::train(&cfg, &layout, &modality.subsets()),
        Command::Evaluate { cohort, modality, model } => {
            let split = match cohort {
                CohortArg::Internal => Split::Test,
                CohortArg::External => Split::External,
            };
            let subsets = modality.subsets();
            if model.is_some() && subsets.len() != 1 {
                return Err(CliError::ConfigInvalid("--model needs a single --modality".into()));
            }
            commands::evaluate(&cfg, &layout, &subsets, split, model.as_deref())
        }
        Command::Explain { modality } => commands::explain(&cfg, &layout, &modality.subsets()),
        Command::Report => commands::report(&cfg, &layout),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&json!({"status": "ok", "result": summary})).unwrap());
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({"status": "error", "kind": e.kind(), "message": e.to_string()}))
                    .unwrap()
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
