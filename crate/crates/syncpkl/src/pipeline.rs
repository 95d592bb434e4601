//! Stage orchestration: each stage reads its predecessor's store under the
//! work directory, writes its own plus a manifest, and embeds the resolved
//! config digest so mismatched chained runs are rejected.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PipelineConfig, ScorerKind};
use crate::corpus::{self, CorpusFormat, Dialogue};
use crate::dataset::{
    self, manifest_path, read_dataset, sha256_hex, write_dataset, AssemblyInfo, DatasetVariant,
    Manifest, SynCPKLExample,
};
use crate::eval::{
    per_relation_metrics, render_report, sample_errors, write_review_file, EvaluatedExample,
    PredictionRecord,
};
use crate::filter::{
    apply_soft_labels, calibrate_threshold, score_candidates, HttpScorer, LexicalOverlapScorer,
    ScoreParts, Scorer,
};
use crate::labeler::{annotate, combine_labels, Checkpoint, PromptTemplate, RequestParams, Variant};
use crate::llm::{write_atomic, LlmClient};
use crate::pairing::{build_candidates, CandidateExample, PairingPolicy};
use crate::trainer::{
    predict, train, training_pairs_text, serialize_training_pairs, ClassifierBackend,
    FeatureConfig, ReferenceBackend, TrainRun, DECISION_THRESHOLD, REFERENCE_BACKEND_ID,
};

pub const STAGE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Pair,
    Filter,
    Label,
    Build,
    Train,
    Evaluate,
    Errors,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Pair => "pair",
            Stage::Filter => "filter",
            Stage::Label => "label",
            Stage::Build => "build",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Errors => "errors",
        }
    }

    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Pair,
        Stage::Filter,
        Stage::Label,
        Stage::Build,
        Stage::Train,
        Stage::Evaluate,
        Stage::Errors,
    ];

    fn predecessor(&self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Pair => Some(Stage::Ingest),
            Stage::Filter => Some(Stage::Pair),
            Stage::Label => Some(Stage::Filter),
            Stage::Build => Some(Stage::Label),
            Stage::Train => Some(Stage::Build),
            Stage::Evaluate => Some(Stage::Train),
            Stage::Errors => Some(Stage::Evaluate),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {missing} has not run yet; run `{missing}` first")]
    MissingPredecessor { missing: &'static str },
    #[error("config digest mismatch: stage {stage} ran with config {found}, current is {current}; re-run from `{stage}`")]
    ConfigDigestMismatch { stage: &'static str, found: String, current: String },
    #[error("data corruption: {0}")]
    Corruption(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// CLI exit code: 2 for stage failures, 3 for corruption.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Corruption(_) | PipelineError::ConfigDigestMismatch { .. } => 3,
            _ => 2,
        }
    }
}

fn stage_err(stage: Stage, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage: stage.name(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub schema_version: u32,
    pub count: usize,
    pub content_digest: String,
    pub config_digest: String,
}

pub fn stage_dir(config: &PipelineConfig, stage: Stage) -> PathBuf {
    config.paths.work_dir.join(stage.name())
}

fn stage_manifest_path(config: &PipelineConfig, stage: Stage) -> PathBuf {
    stage_dir(config, stage).join("manifest.json")
}

fn write_stage_manifest(
    config: &PipelineConfig,
    stage: Stage,
    count: usize,
    content_digest: String,
) -> Result<(), PipelineError> {
    let manifest = StageManifest {
        stage: stage.name().to_string(),
        schema_version: STAGE_SCHEMA_VERSION,
        count,
        content_digest,
        config_digest: config.digest(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&stage_manifest_path(config, stage), &bytes).map_err(|e| stage_err(stage, e))
}

fn check_predecessor(config: &PipelineConfig, stage: Stage) -> Result<(), PipelineError> {
    let Some(pred) = stage.predecessor() else {
        return Ok(());
    };
    let path = stage_manifest_path(config, pred);
    let bytes = fs::read(&path)
        .map_err(|_| PipelineError::MissingPredecessor { missing: pred.name() })?;
    let manifest: StageManifest = serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Corruption(format!("{}: {e}", path.display())))?;
    let current = config.digest();
    if manifest.config_digest != current {
        return Err(PipelineError::ConfigDigestMismatch {
            stage: pred.name(),
            found: manifest.config_digest,
            current,
        });
    }
    Ok(())
}

/// One structured log line per stage boundary.
pub fn log_event(stage: Stage, event: &str, count: usize) {
    eprintln!(
        "{}",
        serde_json::json!({ "stage": stage.name(), "event": event, "count": count })
    );
}

fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<String> {
    let mut body = String::new();
    for item in items {
        body.push_str(&serde_json::to_string(item).expect("record serializes"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())?;
    Ok(sha256_hex(body.as_bytes()))
}

fn read_ndjson<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| stage_err(stage, format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| {
            PipelineError::Corruption(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn run_ingest(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Ingest;
    let file = fs::File::open(&config.paths.corpus).map_err(|e| {
        stage_err(stage, format!("{}: {e}", config.paths.corpus.display()))
    })?;
    let outcome = corpus::parse_corpus(BufReader::new(file), config.corpus.format)
        .map_err(|e| stage_err(stage, e))?;
    let dir = stage_dir(config, stage);
    let lines: Vec<String> = outcome
        .dialogues
        .iter()
        .map(corpus::serialize_canonical)
        .collect();
    let body = if lines.is_empty() { String::new() } else { lines.join("\n") + "\n" };
    write_atomic(&dir.join("dialogues.ndjson"), body.as_bytes())
        .map_err(|e| stage_err(stage, e))?;
    write_ndjson(&dir.join("rejects.ndjson"), &outcome.rejects).map_err(|e| stage_err(stage, e))?;
    log_event(stage, "rejected", outcome.rejects.len());
    log_event(stage, "complete", outcome.dialogues.len());
    write_stage_manifest(config, stage, outcome.dialogues.len(), sha256_hex(body.as_bytes()))
}

fn load_dialogues(config: &PipelineConfig, stage: Stage) -> Result<Vec<Dialogue>, PipelineError> {
    let path = stage_dir(config, Stage::Ingest).join("dialogues.ndjson");
    let file = fs::File::open(&path)
        .map_err(|_| PipelineError::MissingPredecessor { missing: Stage::Ingest.name() })?;
    let outcome = corpus::parse_corpus(BufReader::new(file), CorpusFormat::Canonical)
        .map_err(|e| stage_err(stage, e))?;
    if let Some(reject) = outcome.rejects.first() {
        return Err(PipelineError::Corruption(format!(
            "{}: {} ({})",
            path.display(),
            reject.reason,
            reject.source_locator
        )));
    }
    Ok(outcome.dialogues)
}

pub fn run_pair(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Pair;
    check_predecessor(config, stage)?;
    let dialogues = load_dialogues(config, stage)?;
    let policy = PairingPolicy {
        shared_fact_policy: config.pairing.shared_fact_policy,
        max_negatives_per_window: config.pairing.max_negatives_per_window,
    };
    let mut candidates = Vec::new();
    for dialogue in &dialogues {
        let windows = corpus::extract_windows(dialogue, config.corpus.window_size)
            .map_err(|e| stage_err(stage, e))?;
        candidates.extend(build_candidates(dialogue, &windows, &policy));
    }
    let digest = write_ndjson(&stage_dir(config, stage).join("candidates.ndjson"), &candidates)
        .map_err(|e| stage_err(stage, e))?;
    log_event(stage, "complete", candidates.len());
    write_stage_manifest(config, stage, candidates.len(), digest)
}

fn make_scorer(config: &PipelineConfig) -> Box<dyn Scorer> {
    match config.filter.scorer {
        ScorerKind::Reference => Box::new(LexicalOverlapScorer),
        ScorerKind::Http => Box::new(HttpScorer {
            endpoint: config.filter.endpoint.clone().expect("validated"),
            timeout: Duration::from_millis(config.filter.timeout_ms),
            max_attempts: config.filter.max_attempts,
        }),
    }
}

pub fn run_filter(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Filter;
    check_predecessor(config, stage)?;
    let mut candidates: Vec<CandidateExample> =
        read_ndjson(&stage_dir(config, Stage::Pair).join("candidates.ndjson"), stage)?;
    let scorer = make_scorer(config);
    score_candidates(&mut candidates, scorer.as_ref(), ScoreParts::default(), false)
        .map_err(|e| stage_err(stage, e))?;
    let scores: Vec<f64> = candidates
        .iter()
        .filter(|c| !c.scoring_failed)
        .flat_map(|c| [c.filter_head_score, c.filter_tail_score])
        .flatten()
        .collect();
    let calibration = calibrate_threshold(&scores, config.filter.target_positive_rate)
        .map_err(|e| stage_err(stage, e))?;
    apply_soft_labels(&mut candidates, &calibration, config.filter.rule);
    if config.filter.drop_soft_negatives {
        candidates.retain(|c| c.soft_label != Some(false));
    }
    let dir = stage_dir(config, stage);
    write_atomic(
        &dir.join("calibration.json"),
        &serde_json::to_vec_pretty(&calibration).expect("calibration serializes"),
    )
    .map_err(|e| stage_err(stage, e))?;
    let digest =
        write_ndjson(&dir.join("candidates.ndjson"), &candidates).map_err(|e| stage_err(stage, e))?;
    log_event(stage, "complete", candidates.len());
    write_stage_manifest(config, stage, candidates.len(), digest)
}

fn load_template(
    path: &Option<PathBuf>,
    variant: Variant,
    stage: Stage,
) -> Result<PromptTemplate, PipelineError> {
    match path {
        Some(p) => {
            let t = PromptTemplate::from_file(p).map_err(|e| stage_err(stage, e))?;
            if t.variant != variant {
                return Err(stage_err(
                    stage,
                    format!("template {} has wrong variant", t.template_id),
                ));
            }
            Ok(t)
        }
        None => Ok(PromptTemplate::cot_v1(variant)),
    }
}

pub fn run_label(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Label;
    check_predecessor(config, stage)?;
    let mut candidates: Vec<CandidateExample> =
        read_ndjson(&stage_dir(config, Stage::Filter).join("candidates.ndjson"), stage)?;
    let head_template = load_template(&config.labeler.head_template, Variant::Head, stage)?;
    let tail_template = load_template(&config.labeler.tail_template, Variant::Tail, stage)?;
    let params = RequestParams {
        model_id: config.labeler.model_id.clone(),
        temperature: config.labeler.temperature,
        max_tokens: config.labeler.max_tokens,
    };
    let client = LlmClient::new(config.labeler.mode, &config.labeler.fixture_dir);
    let dir = stage_dir(config, stage);
    fs::create_dir_all(&dir).map_err(|e| stage_err(stage, e))?;

    let mut head_ckpt =
        Checkpoint::open(dir.join("annotations_head.ndjson")).map_err(|e| stage_err(stage, e))?;
    let head_results = annotate(
        &candidates,
        &client,
        &head_template,
        &params,
        config.labeler.retry_max,
        &mut head_ckpt,
    )
    .map_err(|e| stage_err(stage, e))?;
    let mut tail_ckpt =
        Checkpoint::open(dir.join("annotations_tail.ndjson")).map_err(|e| stage_err(stage, e))?;
    let tail_results = annotate(
        &candidates,
        &client,
        &tail_template,
        &params,
        config.labeler.retry_max,
        &mut tail_ckpt,
    )
    .map_err(|e| stage_err(stage, e))?;

    for ((cand, head), tail) in candidates.iter_mut().zip(&head_results).zip(&tail_results) {
        debug_assert_eq!(cand.candidate_id, head.candidate_id);
        debug_assert_eq!(cand.candidate_id, tail.candidate_id);
        cand.llm_head_label = Some(head.verdict);
        cand.llm_tail_label = Some(tail.verdict);
        let combined = combine_labels(head.verdict, tail.verdict);
        cand.final_label = combined.decided.then_some(combined.final_label);
    }
    let digest =
        write_ndjson(&dir.join("candidates.ndjson"), &candidates).map_err(|e| stage_err(stage, e))?;
    log_event(stage, "complete", candidates.len());
    write_stage_manifest(config, stage, candidates.len(), digest)
}

pub fn dataset_path(config: &PipelineConfig, variant: DatasetVariant) -> PathBuf {
    stage_dir(config, Stage::Build).join(format!("dataset_{}.ndjson", variant.as_str()))
}

pub fn run_build(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Build;
    check_predecessor(config, stage)?;
    let candidates: Vec<CandidateExample> =
        read_ndjson(&stage_dir(config, Stage::Label).join("candidates.ndjson"), stage)?;
    let dir = stage_dir(config, stage);
    let info = AssemblyInfo {
        template_id: Some("cot_v1".to_string()),
        model_id: Some(config.labeler.model_id.clone()),
    };
    let config_digest = config.digest();
    let mut total = 0;
    for variant in [
        DatasetVariant::HeadVariant,
        DatasetVariant::TailVariant,
        DatasetVariant::Combined,
    ] {
        let outcome = dataset::assemble(&candidates, variant, config.dataset.abstain_policy, &info);
        write_dataset(&outcome.examples, &dataset_path(config, variant), Some(config_digest.clone()))
            .map_err(|e| stage_err(stage, e))?;
        let s = dataset::stats(&outcome.examples, outcome.abstain_excluded);
        write_atomic(
            &dir.join(format!("stats_{}.json", variant.as_str())),
            &serde_json::to_vec_pretty(&s).expect("stats serialize"),
        )
        .map_err(|e| stage_err(stage, e))?;
        log_event(stage, variant.as_str(), outcome.examples.len());
        total += outcome.examples.len();
    }
    // digest over the three dataset digests
    let mut digests = String::new();
    for variant in [
        DatasetVariant::HeadVariant,
        DatasetVariant::TailVariant,
        DatasetVariant::Combined,
    ] {
        let m = fs::read(manifest_path(&dataset_path(config, variant)))
            .map_err(|e| stage_err(stage, e))?;
        let m: Manifest = serde_json::from_slice(&m).map_err(|e| stage_err(stage, e))?;
        digests.push_str(&m.content_digest);
    }
    log_event(stage, "complete", total);
    write_stage_manifest(config, stage, total, sha256_hex(digests.as_bytes()))
}

/// Dataset variant each feature configuration trains on.
pub fn variant_for(feature_config: FeatureConfig) -> DatasetVariant {
    match feature_config {
        FeatureConfig::H => DatasetVariant::HeadVariant,
        FeatureConfig::T => DatasetVariant::TailVariant,
        FeatureConfig::HT | FeatureConfig::RHT => DatasetVariant::Combined,
    }
}

pub fn make_backend(config: &PipelineConfig) -> Result<Box<dyn ClassifierBackend>, PipelineError> {
    match config.trainer.backend_id.as_str() {
        REFERENCE_BACKEND_ID => Ok(Box::new(ReferenceBackend)),
        other => Err(PipelineError::Stage {
            stage: "train",
            message: format!(
                "backend_id {other:?} is not bundled; only {REFERENCE_BACKEND_ID:?} ships with this repo"
            ),
        }),
    }
}

fn load_split(
    config: &PipelineConfig,
    stage: Stage,
) -> Result<(Vec<SynCPKLExample>, Vec<SynCPKLExample>, Manifest), PipelineError> {
    let path = dataset_path(config, variant_for(config.trainer.feature_config));
    let (examples, manifest) = read_dataset(&path).map_err(|e| match e {
        dataset::DatasetError::DigestMismatch { .. } => PipelineError::Corruption(e.to_string()),
        other => stage_err(stage, other),
    })?;
    let (train_set, valid_set) = dataset::split(
        &examples,
        config.dataset.train_fraction,
        config.dataset.validation_fraction,
        config.dataset.seed,
    )
    .map_err(|e| stage_err(stage, e))?;
    Ok((train_set, valid_set, manifest))
}

pub fn run_train(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Train;
    check_predecessor(config, stage)?;
    let (train_set, valid_set, manifest) = load_split(config, stage)?;
    let backend = make_backend(config)?;
    let train_config = crate::trainer::TrainConfig {
        feature_config: config.trainer.feature_config,
        seed: config.trainer.seed,
        epochs: config.trainer.epochs,
        batch_size: config.trainer.batch_size,
        learning_rate: config.trainer.learning_rate,
        max_sequence_length: config.trainer.max_sequence_length,
    };
    let run = train(&train_set, &valid_set, &train_config, backend.as_ref(), &manifest.content_digest)
        .map_err(|e| stage_err(stage, e))?;
    let dir = stage_dir(config, stage);
    let pairs_text =
        training_pairs_text(&serialize_training_pairs(&train_set, config.trainer.feature_config));
    write_atomic(&dir.join("train_pairs.ndjson"), pairs_text.as_bytes())
        .map_err(|e| stage_err(stage, e))?;
    run.model.save(&dir.join("model.json")).map_err(|e| stage_err(stage, e))?;
    let run_bytes = serde_json::to_vec_pretty(&run).expect("train run serializes");
    write_atomic(&dir.join("trainrun.json"), &run_bytes).map_err(|e| stage_err(stage, e))?;
    log_event(stage, "complete", train_set.len());
    write_stage_manifest(config, stage, train_set.len(), sha256_hex(&run_bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub example_id: String,
    pub probability: f64,
    pub predicted: bool,
    pub gold: bool,
}

pub fn run_evaluate(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Evaluate;
    check_predecessor(config, stage)?;
    let run_path = stage_dir(config, Stage::Train).join("trainrun.json");
    let run: TrainRun = serde_json::from_slice(
        &fs::read(&run_path)
            .map_err(|_| PipelineError::MissingPredecessor { missing: Stage::Train.name() })?,
    )
    .map_err(|e| PipelineError::Corruption(format!("{}: {e}", run_path.display())))?;
    let (_, valid_set, _) = load_split(config, stage)?;
    if valid_set.is_empty() {
        return Err(stage_err(stage, "validation split is empty"));
    }
    let backend = make_backend(config)?;
    let mut lines = Vec::with_capacity(valid_set.len());
    let mut evaluated = Vec::with_capacity(valid_set.len());
    for ex in &valid_set {
        let fact = crate::corpus::PersonaFact {
            head: ex.head.clone(),
            relation: ex.relation,
            tail: ex.tail.clone(),
        };
        let probability =
            predict(&run, backend.as_ref(), &ex.context, &fact).map_err(|e| stage_err(stage, e))?;
        let predicted = probability >= DECISION_THRESHOLD;
        lines.push(PredictionLine {
            example_id: ex.example_id.clone(),
            probability,
            predicted,
            gold: ex.label,
        });
        evaluated.push(EvaluatedExample { relation: ex.relation, predicted, gold: ex.label });
    }
    let report = per_relation_metrics(
        &evaluated,
        &format!("{:?} on {}", config.trainer.feature_config, config.trainer.backend_id),
    )
    .map_err(|e| stage_err(stage, e))?;
    let dir = stage_dir(config, stage);
    write_ndjson(&dir.join("predictions.ndjson"), &lines).map_err(|e| stage_err(stage, e))?;
    let report_bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_atomic(&dir.join("metrics.json"), &report_bytes).map_err(|e| stage_err(stage, e))?;
    write_atomic(&dir.join("report.txt"), render_report(&report).as_bytes())
        .map_err(|e| stage_err(stage, e))?;
    log_event(stage, "complete", lines.len());
    write_stage_manifest(config, stage, lines.len(), sha256_hex(&report_bytes))
}

pub fn run_errors(config: &PipelineConfig) -> Result<(), PipelineError> {
    let stage = Stage::Errors;
    check_predecessor(config, stage)?;
    let predictions: Vec<PredictionLine> =
        read_ndjson(&stage_dir(config, Stage::Evaluate).join("predictions.ndjson"), stage)?;
    let (examples, _) =
        read_dataset(&dataset_path(config, variant_for(config.trainer.feature_config)))
            .map_err(|e| stage_err(stage, e))?;
    let by_id: std::collections::HashMap<&str, &SynCPKLExample> =
        examples.iter().map(|e| (e.example_id.as_str(), e)).collect();
    let mut records = Vec::with_capacity(predictions.len());
    for p in &predictions {
        let Some(ex) = by_id.get(p.example_id.as_str()) else {
            return Err(PipelineError::Corruption(format!(
                "prediction for unknown example {}",
                p.example_id
            )));
        };
        let fact = crate::corpus::PersonaFact {
            head: ex.head.clone(),
            relation: ex.relation,
            tail: ex.tail.clone(),
        };
        records.push(PredictionRecord {
            example_id: p.example_id.clone(),
            context: ex.context.clone(),
            fact: crate::trainer::serialize_fact(&fact, FeatureConfig::RHT),
            gold: p.gold,
            predicted: p.predicted,
        });
    }
    let samples = sample_errors(&records, config.eval.error_samples, config.eval.seed);
    let dir = stage_dir(config, stage);
    fs::create_dir_all(&dir).map_err(|e| stage_err(stage, e))?;
    write_review_file(&samples, &dir.join("error_review.ndjson")).map_err(|e| stage_err(stage, e))?;
    log_event(stage, "complete", samples.len());
    write_stage_manifest(config, stage, samples.len(), String::new())
}

pub fn run_stage(config: &PipelineConfig, stage: Stage) -> Result<(), PipelineError> {
    match stage {
        Stage::Ingest => run_ingest(config),
        Stage::Pair => run_pair(config),
        Stage::Filter => run_filter(config),
        Stage::Label => run_label(config),
        Stage::Build => run_build(config),
        Stage::Train => run_train(config),
        Stage::Evaluate => run_evaluate(config),
        Stage::Errors => run_errors(config),
    }
}

/// `all`: chains every stage in order.
pub fn run_all(config: &PipelineConfig) -> Result<(), PipelineError> {
    for stage in Stage::ALL {
        run_stage(config, stage)?;
    }
    Ok(())
}
