//! Training harness: feature-configuration serialization of persona facts,
//! a pluggable text-pair classifier backend, and the head∧tail composition.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PersonaFact;
use crate::dataset::SynCPKLExample;
use crate::eval::{compute_metrics, MetricsFragment};
use crate::llm::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureConfig {
    /// Head only.
    H,
    /// Tail only.
    T,
    /// Head and tail.
    HT,
    /// Head, relation, tail.
    RHT,
}

/// Serializes a fact under a feature configuration, with " | " as the field
/// delimiter and the fixed relation verbalization map.
pub fn serialize_fact(fact: &PersonaFact, config: FeatureConfig) -> String {
    match config {
        FeatureConfig::H => fact.head.clone(),
        FeatureConfig::T => fact.tail.clone(),
        FeatureConfig::HT => format!("{} | {}", fact.head, fact.tail),
        FeatureConfig::RHT => {
            format!("{} | {} | {}", fact.head, fact.relation.verbalize(), fact.tail)
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("model artifact: {0}")]
    ModelArtifact(String),
    #[error("compose_and requires configs H and T, got {0:?} and {1:?}")]
    ComposeConfigMismatch(FeatureConfig, FeatureConfig),
}

/// An opaque trained model: the backend id plus a backend-defined payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub backend_id: String,
    pub payload: serde_json::Value,
}

impl ModelHandle {
    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        let bytes = serde_json::to_vec_pretty(self).expect("model handle serializes");
        write_atomic(path, &bytes).map_err(|e| TrainerError::ModelArtifact(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ModelHandle, TrainerError> {
        let bytes = fs::read(path)
            .map_err(|e| TrainerError::ModelArtifact(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| TrainerError::ModelArtifact(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub feature_config: FeatureConfig,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_sequence_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            feature_config: FeatureConfig::RHT,
            seed: 0,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.5,
            max_sequence_length: 512,
        }
    }
}

/// One serialized training pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub context: String,
    pub fact_text: String,
    pub label: bool,
}

/// Deterministic (context, serialized fact, label) triples for a dataset.
pub fn serialize_training_pairs(
    examples: &[SynCPKLExample],
    config: FeatureConfig,
) -> Vec<TrainPair> {
    examples
        .iter()
        .map(|ex| {
            let fact = PersonaFact {
                head: ex.head.clone(),
                relation: ex.relation,
                tail: ex.tail.clone(),
            };
            TrainPair {
                context: ex.context.clone(),
                fact_text: serialize_fact(&fact, config),
                label: ex.label,
            }
        })
        .collect()
}

pub fn training_pairs_text(pairs: &[TrainPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pair serializes"));
        out.push('\n');
    }
    out
}

/// Text-pair classifier boundary. Training consumes labeled
/// (context_text, fact_text) pairs; prediction maps a pair to a probability.
/// Prediction must be deterministic for a fixed handle and inputs.
pub trait ClassifierBackend {
    fn backend_id(&self) -> &str;

    fn train(&self, pairs: &[TrainPair], config: &TrainConfig) -> Result<ModelHandle, TrainerError>;

    fn predict(
        &self,
        model: &ModelHandle,
        context: &str,
        fact_text: &str,
    ) -> Result<f64, TrainerError>;
}

pub const REFERENCE_BACKEND_ID: &str = "reference_overlap_v1";

/// Bundled lightweight backend: logistic regression over bag-of-token
/// overlap features, so the harness is testable without a pretrained
/// encoder. Encoder backends plug in via the same trait.
#[derive(Debug, Default, Clone, Copy)]
pub struct ReferenceBackend;

fn token_set(text: &str, max_tokens: usize) -> std::collections::HashSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_tokens)
        .map(str::to_string)
        .collect()
}

/// Feature vector for a (context, fact) pair: bias, fact-token coverage,
/// context-token coverage, Jaccard overlap, dampened common-token count.
fn features(context: &str, fact_text: &str, max_tokens: usize) -> [f64; 5] {
    let ctx = token_set(context, max_tokens);
    let fact = token_set(fact_text, max_tokens);
    let common = ctx.intersection(&fact).count() as f64;
    let union = (ctx.len() + fact.len()) as f64 - common;
    [
        1.0,
        if fact.is_empty() { 0.0 } else { common / fact.len() as f64 },
        if ctx.is_empty() { 0.0 } else { common / ctx.len() as f64 },
        if union == 0.0 { 0.0 } else { common / union },
        (1.0 + common).ln(),
    ]
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceModel {
    weights: [f64; 5],
    max_sequence_length: usize,
}

impl ClassifierBackend for ReferenceBackend {
    fn backend_id(&self) -> &str {
        REFERENCE_BACKEND_ID
    }

    fn train(&self, pairs: &[TrainPair], config: &TrainConfig) -> Result<ModelHandle, TrainerError> {
        if pairs.is_empty() {
            return Err(TrainerError::EmptyTrainSet);
        }
        let feats: Vec<[f64; 5]> = pairs
            .iter()
            .map(|p| features(&p.context, &p.fact_text, config.max_sequence_length))
            .collect();
        let labels: Vec<f64> = pairs.iter().map(|p| if p.label { 1.0 } else { 0.0 }).collect();
        // Full-batch gradient descent; deterministic given fixed inputs.
        let mut w = [0.0f64; 5];
        let n = pairs.len() as f64;
        for _ in 0..config.epochs {
            let mut grad = [0.0f64; 5];
            for (x, &y) in feats.iter().zip(&labels) {
                let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
                let err = sigmoid(z) - y;
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += err * xi;
                }
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= config.learning_rate * g / n;
            }
        }
        let model = ReferenceModel {
            weights: w,
            max_sequence_length: config.max_sequence_length,
        };
        Ok(ModelHandle {
            backend_id: REFERENCE_BACKEND_ID.to_string(),
            payload: serde_json::to_value(model).expect("model serializes"),
        })
    }

    fn predict(
        &self,
        model: &ModelHandle,
        context: &str,
        fact_text: &str,
    ) -> Result<f64, TrainerError> {
        if model.backend_id != REFERENCE_BACKEND_ID {
            return Err(TrainerError::Backend(format!(
                "model was trained with backend {}",
                model.backend_id
            )));
        }
        let m: ReferenceModel = serde_json::from_value(model.payload.clone())
            .map_err(|e| TrainerError::ModelArtifact(e.to_string()))?;
        let x = features(context, fact_text, m.max_sequence_length);
        Ok(sigmoid(m.weights.iter().zip(&x).map(|(wi, xi)| wi * xi).sum()))
    }
}

/// Full provenance for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub dataset_manifest_digest: String,
    pub backend_id: String,
    pub model: ModelHandle,
    pub metrics_on_validation: Option<MetricsFragment>,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Trains on serialized (context, fact_text, label) triples and records
/// validation metrics at the default decision threshold.
pub fn train(
    train_set: &[SynCPKLExample],
    validation_set: &[SynCPKLExample],
    config: &TrainConfig,
    backend: &dyn ClassifierBackend,
    dataset_manifest_digest: &str,
) -> Result<TrainRun, TrainerError> {
    if train_set.is_empty() {
        return Err(TrainerError::EmptyTrainSet);
    }
    let pairs = serialize_training_pairs(train_set, config.feature_config);
    let model = backend.train(&pairs, config)?;
    let metrics = if validation_set.is_empty() {
        None
    } else {
        let val_pairs = serialize_training_pairs(validation_set, config.feature_config);
        let mut predictions = Vec::with_capacity(val_pairs.len());
        let mut gold = Vec::with_capacity(val_pairs.len());
        for p in &val_pairs {
            let prob = backend.predict(&model, &p.context, &p.fact_text)?;
            predictions.push(prob >= DECISION_THRESHOLD);
            gold.push(p.label);
        }
        Some(compute_metrics(&predictions, &gold).map_err(|e| TrainerError::Backend(e.to_string()))?)
    };
    Ok(TrainRun {
        config: config.clone(),
        dataset_manifest_digest: dataset_manifest_digest.to_string(),
        backend_id: backend.backend_id().to_string(),
        model,
        metrics_on_validation: metrics,
    })
}

/// Probability that the fact (serialized under the run's feature config) is
/// relevant to the context.
pub fn predict(
    run: &TrainRun,
    backend: &dyn ClassifierBackend,
    context: &str,
    fact: &PersonaFact,
) -> Result<f64, TrainerError> {
    let fact_text = serialize_fact(fact, run.config.feature_config);
    backend.predict(&run.model, context, &fact_text)
}

/// Head∧tail composition of two single-part runs. Boolean output is the AND
/// of the component decisions at threshold 0.5; the reported probability is
/// min(p_h, p_t), the weakest t-norm consistent with the boolean rule.
pub struct ComposedPredictor<'a> {
    run_h: &'a TrainRun,
    run_t: &'a TrainRun,
    backend: &'a dyn ClassifierBackend,
}

pub fn compose_and<'a>(
    run_h: &'a TrainRun,
    run_t: &'a TrainRun,
    backend: &'a dyn ClassifierBackend,
) -> Result<ComposedPredictor<'a>, TrainerError> {
    if run_h.config.feature_config != FeatureConfig::H
        || run_t.config.feature_config != FeatureConfig::T
    {
        return Err(TrainerError::ComposeConfigMismatch(
            run_h.config.feature_config,
            run_t.config.feature_config,
        ));
    }
    Ok(ComposedPredictor { run_h, run_t, backend })
}

impl ComposedPredictor<'_> {
    pub fn probabilities(&self, context: &str, fact: &PersonaFact) -> Result<(f64, f64), TrainerError> {
        Ok((
            predict(self.run_h, self.backend, context, fact)?,
            predict(self.run_t, self.backend, context, fact)?,
        ))
    }

    pub fn probability(&self, context: &str, fact: &PersonaFact) -> Result<f64, TrainerError> {
        let (p_h, p_t) = self.probabilities(context, fact)?;
        Ok(p_h.min(p_t))
    }

    pub fn classify(&self, context: &str, fact: &PersonaFact) -> Result<bool, TrainerError> {
        let (p_h, p_t) = self.probabilities(context, fact)?;
        Ok(p_h >= DECISION_THRESHOLD && p_t >= DECISION_THRESHOLD)
    }
}
