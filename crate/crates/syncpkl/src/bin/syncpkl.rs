//! Pipeline CLI: per-stage subcommands plus a full end-to-end run.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 stage failure, 3 data
//! corruption.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use syncpkl::config::PipelineConfig;
use syncpkl::dataset::{read_dataset, stats, DatasetVariant};
use syncpkl::eval::category_frequency;
use syncpkl::pipeline::{self, dataset_path, run_stage, variant_for, Stage};

#[derive(Parser)]
#[command(name = "syncpkl", version, about = "Synthesize and evaluate persona-fact linking datasets")]
struct Cli {
    /// Path to the pipeline configuration file.
    #[arg(short, long, default_value = "syncpkl.toml")]
    config: PathBuf,

    /// Dotted-path config overrides, e.g. --set dataset.seed=7
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the corpus into canonical dialogues plus a rejects report.
    Ingest,
    /// Build heuristic (window, fact) candidates.
    Pair,
    /// Score candidates, calibrate a threshold, assign soft labels.
    Filter,
    /// Annotate candidates with the LLM labeler (head and tail variants).
    Label,
    /// Assemble the head, tail, and combined datasets.
    Build,
    /// Train the configured backend on the configured dataset variant.
    Train,
    /// Predict on the validation split and report metrics per relation.
    Evaluate,
    /// Sample misclassified examples into a review file.
    Errors {
        /// Re-ingest an annotated review file and print category counts.
        #[arg(long)]
        review: Option<PathBuf>,
    },
    /// Print stats for a built dataset variant.
    Stats {
        #[arg(long, default_value = "combined")]
        variant: String,
    },
    /// Run every stage in order.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match PipelineConfig::load(&cli.config, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match &cli.command {
        Command::Ingest => run_stage(&config, Stage::Ingest),
        Command::Pair => run_stage(&config, Stage::Pair),
        Command::Filter => run_stage(&config, Stage::Filter),
        Command::Label => run_stage(&config, Stage::Label),
        Command::Build => run_stage(&config, Stage::Build),
        Command::Train => run_stage(&config, Stage::Train),
        Command::Evaluate => run_stage(&config, Stage::Evaluate),
        Command::Errors { review: Some(path) } => {
            return match category_frequency(path) {
                Ok((counts, uncategorized)) => {
                    for (category, count) in &counts {
                        println!("{}\t{count}", serde_json::to_string(category).unwrap().trim_matches('"'));
                    }
                    println!("uncategorized\t{uncategorized}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
        Command::Errors { review: None } => run_stage(&config, Stage::Errors),
        Command::Stats { variant } => return run_stats(&config, variant),
        Command::All => pipeline::run_all(&config),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_stats(config: &PipelineConfig, variant: &str) -> ExitCode {
    let variant = match variant {
        "head" | "head_variant" => DatasetVariant::HeadVariant,
        "tail" | "tail_variant" => DatasetVariant::TailVariant,
        "combined" => DatasetVariant::Combined,
        "configured" => variant_for(config.trainer.feature_config),
        other => {
            eprintln!("error: unknown variant {other:?} (head, tail, combined, configured)");
            return ExitCode::from(1);
        }
    };
    match read_dataset(&dataset_path(config, variant)) {
        Ok((examples, _)) => {
            let s = stats(&examples, 0);
            println!("{}", serde_json::to_string_pretty(&s).unwrap());
            ExitCode::SUCCESS
        }
        Err(e @ syncpkl::dataset::DatasetError::DigestMismatch { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
