use std::path::PathBuf;

use clap::{Parser, Subcommand};
use twindiff_core::error::Result;

use twindiff_cli::commands;
use twindiff_cli::config::{self, Profile, RunConfig};
use twindiff_cli::{exit_code, CONFIG_ENV_VAR};

/// Dual-branch anomaly pair generator: synthesize data, train the two-stage
/// model, sample image/part pairs, extract masks, and evaluate the result.
#[derive(Parser)]
#[command(name = "twindiff", version, about)]
struct Cli {
    /// TOML run configuration (defaults to $TWINDIFF_CONFIG when set).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Baseline profile the config file overlays.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,

    /// Override paths.output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Override paths.dataset_dir.
    #[arg(long, global = true, value_name = "DIR")]
    dataset_dir: Option<PathBuf>,

    /// Override paths.checkpoint_dir.
    #[arg(long, global = true, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,

    /// Override paths.pairs_dir.
    #[arg(long, global = true, value_name = "DIR")]
    pairs_dir: Option<PathBuf>,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the anomaly dataset and the defect-free training set
    GenData,
    /// Stage one: train the base denoiser on defect-free images
    Pretrain,
    /// Stage two: adapt the dual branches on the few-shot anomaly pairs
    Finetune,
    /// Sample anomaly image/part pairs from a dual checkpoint
    Generate {
        /// How many pairs to sample (overrides sample.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Threshold generated anomaly parts into binary masks
    ExtractMasks,
    /// Score generated pairs: diversity, mask alignment, detection transfer
    Evaluate,
    /// Export per-token cross-attention panels from a dual checkpoint
    InspectAttn,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from));
    let mut cfg = config::load(path.as_deref(), cli.profile)?;
    if let Some(dir) = &cli.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    if let Some(dir) = &cli.dataset_dir {
        cfg.paths.dataset_dir = dir.clone();
    }
    if let Some(dir) = &cli.checkpoint_dir {
        cfg.paths.checkpoint_dir = dir.clone();
    }
    if let Some(dir) = &cli.pairs_dir {
        cfg.paths.pairs_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<PathBuf> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Cmd::GenData => commands::cmd_gen_data(&cfg),
        Cmd::Pretrain => commands::cmd_pretrain(&cfg),
        Cmd::Finetune => commands::cmd_finetune(&cfg),
        Cmd::Generate { count } => commands::cmd_generate(&cfg, count),
        Cmd::ExtractMasks => commands::cmd_extract_masks(&cfg),
        Cmd::Evaluate => commands::cmd_evaluate(&cfg),
        Cmd::InspectAttn => commands::cmd_inspect_attn(&cfg),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
