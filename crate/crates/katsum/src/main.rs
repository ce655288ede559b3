use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use katsum::config::{load_config, PipelineConfig};
use katsum::error::{Error, Result};
use katsum::pipeline::{
    stage_ablate, stage_evaluate, stage_extract, stage_generate, stage_label, stage_report,
    stage_train, stage_train_classifier, stage_train_kge, Artifacts, Variant,
};

/// Knowledge-aware abstractive summarization pipeline.
#[derive(Parser)]
#[command(name = "katsum", version, about)]
struct Cli {
    /// Key = value configuration file driving every stage.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the artifacts directory from the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    artifacts_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract facts from every configured split.
    ExtractTriplets {
        /// Fraction of each split's documents to keep (deterministic).
        #[arg(long, default_value_t = 1.0)]
        subset_fraction: f64,
    },
    /// Train translation embeddings on the training-split facts.
    TrainKge,
    /// Label each training fact by similarity to its summary's facts.
    LabelTriplets,
    /// Fit the sigmoid fact-selection head on the labeled facts.
    TrainClassifier,
    /// Train one summarizer variant end to end.
    Train {
        /// full, no_classification, or no_kg.
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = 1.0)]
        subset_fraction: f64,
    },
    /// Decode test-split summaries with a trained variant.
    Generate {
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long, default_value_t = 1.0)]
        subset_fraction: f64,
    },
    /// Score one variant's generated summaries against the references.
    Evaluate {
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Train, decode, and score every variant, then write the comparison.
    Ablate {
        #[arg(long, default_value_t = 1.0)]
        subset_fraction: f64,
    },
    /// Collate per-variant scores into report.md and report.json.
    Report,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_deref().ok_or_else(|| {
        Error::InvalidArgument("--config <FILE> is required (see README for the format)".into())
    })?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(dir) = &cli.artifacts_dir {
        cfg.artifacts_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load(&cli)?;
    let artifacts = Artifacts::new(&cfg.artifacts_dir);
    match cli.command {
        Command::ExtractTriplets { subset_fraction } => {
            stage_extract(&cfg, subset_fraction)?;
            println!("extracted facts into {}", cfg.artifacts_dir.display());
        }
        Command::TrainKge => {
            stage_train_kge(&cfg)?;
            println!("trained embeddings -> {}", artifacts.kge().display());
        }
        Command::LabelTriplets => {
            stage_label(&cfg)?;
            println!("labeled facts -> {}", artifacts.labeled().display());
        }
        Command::TrainClassifier => {
            stage_train_classifier(&cfg)?;
            println!("trained selection head -> {}", artifacts.classifier().display());
        }
        Command::Train {
            variant,
            subset_fraction,
        } => {
            stage_train(&cfg, variant, subset_fraction)?;
            println!("trained {variant} -> {}", artifacts.model(variant).display());
        }
        Command::Generate {
            variant,
            subset_fraction,
        } => {
            stage_generate(&cfg, variant, subset_fraction)?;
            println!(
                "generated summaries -> {}",
                artifacts.generated(variant).display()
            );
        }
        Command::Evaluate { variant } => {
            let report = stage_evaluate(&cfg, variant)?;
            println!(
                "{variant}: rouge1 {:.1} rouge2 {:.1} rougeL {:.1} ({} pairs)",
                report.rouge1, report.rouge2, report.rouge_l, report.n_pairs
            );
        }
        Command::Ablate { subset_fraction } => {
            let md = stage_ablate(&cfg, subset_fraction)?;
            print!("{md}");
        }
        Command::Report => {
            let md = stage_report(&cfg)?;
            print!("{md}");
        }
    }
    Ok(())
}
