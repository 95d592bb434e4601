//! Generates replay fixtures for the labeler without any network access.
//!
//! Renders every head/tail prompt the `label` stage would send for the
//! configured corpus and stores a deterministic rule-based response for
//! each: "Answer: Yes" when the fact part lexically overlaps the window,
//! "Answer: No" otherwise. Stands in for a provider so the bundled corpus
//! runs end to end in replay mode.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use syncpkl::config::PipelineConfig;
use syncpkl::corpus::{extract_windows, parse_corpus, serialize_context};
use syncpkl::filter::{FilterError, LexicalOverlapScorer, Scorer};
use syncpkl::labeler::{render_prompt, PromptTemplate, RequestParams, Variant};
use syncpkl::llm::store_synthetic_fixture;
use syncpkl::pairing::{build_candidates, PairingPolicy};

#[derive(Parser)]
#[command(name = "syncpkl-fixtures", about = "Generate deterministic LLM replay fixtures")]
struct Cli {
    #[arg(short, long, default_value = "syncpkl.toml")]
    config: PathBuf,

    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: &Cli) -> Result<usize, String> {
    let config = PipelineConfig::load(&cli.config, &cli.overrides).map_err(|e| e.to_string())?;
    let file = fs::File::open(&config.paths.corpus)
        .map_err(|e| format!("{}: {e}", config.paths.corpus.display()))?;
    let outcome =
        parse_corpus(BufReader::new(file), config.corpus.format).map_err(|e| e.to_string())?;
    let policy = PairingPolicy {
        shared_fact_policy: config.pairing.shared_fact_policy,
        max_negatives_per_window: config.pairing.max_negatives_per_window,
    };
    let params = RequestParams {
        model_id: config.labeler.model_id.clone(),
        temperature: config.labeler.temperature,
        max_tokens: config.labeler.max_tokens,
    };
    let scorer = LexicalOverlapScorer;
    let mut written = 0;
    for dialogue in &outcome.dialogues {
        let windows =
            extract_windows(dialogue, config.corpus.window_size).map_err(|e| e.to_string())?;
        for cand in build_candidates(dialogue, &windows, &policy) {
            let context = serialize_context(&cand.window);
            for variant in [Variant::Head, Variant::Tail] {
                let template = PromptTemplate::cot_v1(variant);
                let part = match variant {
                    Variant::Head => &cand.fact.head,
                    Variant::Tail => &cand.fact.tail,
                };
                let relevant = is_relevant(&scorer, &context, part).map_err(|e| e.to_string())?;
                let response = if relevant {
                    format!(
                        "The dialogue window mentions content overlapping \"{part}\", so the \
                         target speaker's words support this persona fact.\nAnswer: Yes"
                    )
                } else {
                    format!(
                        "Nothing the target speaker says relates to \"{part}\"; the fact is not \
                         grounded in this window.\nAnswer: No"
                    )
                };
                let request = render_prompt(&cand.window, &cand.fact, &template, &params)
                    .map_err(|e| e.to_string())?;
                store_synthetic_fixture(&config.labeler.fixture_dir, &request, &response)
                    .map_err(|e| e.to_string())?;
                written += 1;
            }
        }
    }
    Ok(written)
}

fn is_relevant(scorer: &LexicalOverlapScorer, context: &str, part: &str) -> Result<bool, FilterError> {
    Ok(scorer.score(context, part)? >= 0.5)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(n) => {
            eprintln!("wrote {n} fixtures");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
