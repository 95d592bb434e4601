//! Pipeline configuration: one TOML file, defaults for every knob, dotted
//! command-line overrides, and a digest of the resolved config that every
//! stage manifest embeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusFormat;
use crate::dataset::AbstainPolicy;
use crate::filter::SoftLabelRule;
use crate::llm::ClientMode;
use crate::pairing::SharedFactPolicy;
use crate::trainer::FeatureConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected key.path=value")]
    BadOverride(String),
    #[error("config validation failed:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: PathBuf::from("fixtures/mini_corpus.json"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub format: CorpusFormat,
    pub window_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            format: CorpusFormat::PersonachatPeacok,
            window_size: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub shared_fact_policy: SharedFactPolicy,
    pub max_negatives_per_window: Option<usize>,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            shared_fact_policy: SharedFactPolicy::ExcludeFromNegatives,
            max_negatives_per_window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Reference,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub scorer: ScorerKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_attempts: u32,
    pub target_positive_rate: f64,
    pub rule: SoftLabelRule,
    /// Drop soft-negative candidates instead of passing everything onward.
    pub drop_soft_negatives: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            scorer: ScorerKind::Reference,
            endpoint: None,
            timeout_ms: 10_000,
            max_attempts: 3,
            target_positive_rate: 0.5,
            rule: SoftLabelRule::BothParts,
            drop_soft_negatives: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub mode: ClientMode,
    pub fixture_dir: PathBuf,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry_max: u32,
    /// Paths to template files; empty means the built-in cot_v1 templates.
    pub head_template: Option<PathBuf>,
    pub tail_template: Option<PathBuf>,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        LabelerConfig {
            mode: ClientMode::Replay,
            fixture_dir: PathBuf::from("fixtures/llm"),
            model_id: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            max_tokens: 512,
            retry_max: 3,
            head_template: None,
            tail_template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub abstain_policy: AbstainPolicy,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_fraction: 0.8,
            validation_fraction: 0.2,
            seed: 42,
            abstain_policy: AbstainPolicy::Exclude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub feature_config: FeatureConfig,
    pub backend_id: String,
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_sequence_length: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            feature_config: FeatureConfig::RHT,
            backend_id: crate::trainer::REFERENCE_BACKEND_ID.to_string(),
            seed: 0,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.5,
            max_sequence_length: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub error_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { error_samples: 50, seed: 7 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub pairing: PairingConfig,
    pub filter: FilterConfig,
    pub labeler: LabelerConfig,
    pub dataset: DatasetConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<PipelineConfig, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: PipelineConfig =
            value.try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Collects every violation, not just the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut violations = Vec::new();
        if self.corpus.window_size == 0 || self.corpus.window_size % 2 == 0 {
            violations.push(format!(
                "corpus.window_size must be odd and >= 1, got {}",
                self.corpus.window_size
            ));
        }
        if !(self.filter.target_positive_rate > 0.0 && self.filter.target_positive_rate < 1.0) {
            violations.push(format!(
                "filter.target_positive_rate must be in (0, 1), got {}",
                self.filter.target_positive_rate
            ));
        }
        if self.filter.scorer == ScorerKind::Http && self.filter.endpoint.is_none() {
            violations.push("filter.endpoint is required when filter.scorer = \"http\"".to_string());
        }
        if self.labeler.retry_max == 0 {
            violations.push("labeler.retry_max must be >= 1".to_string());
        }
        if self.labeler.max_tokens == 0 {
            violations.push("labeler.max_tokens must be >= 1".to_string());
        }
        let frac_sum = self.dataset.train_fraction + self.dataset.validation_fraction;
        if !(self.dataset.train_fraction > 0.0
            && self.dataset.validation_fraction > 0.0
            && (frac_sum - 1.0).abs() < 1e-9)
        {
            violations.push(format!(
                "dataset fractions must be positive and sum to 1, got {} + {}",
                self.dataset.train_fraction, self.dataset.validation_fraction
            ));
        }
        if self.trainer.epochs == 0 {
            violations.push("trainer.epochs must be >= 1".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(violations))
        }
    }

    /// Digest of the fully resolved config; echoed into every manifest so
    /// mismatched stages in a chained run are detectable.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        crate::dataset::sha256_hex(canonical.as_bytes())
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    // Scalars parse as TOML values; anything unparseable is a string.
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw_value.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.trim().to_string()));
    let mut current = root;
    for key in &keys[..keys.len() - 1] {
        if !current.is_table() {
            return Err(ConfigError::BadOverride(spec.to_string()));
        }
        current = current
            .as_table_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    match current.as_table_mut() {
        Some(table) => {
            table.insert(keys[keys.len() - 1].to_string(), parsed);
            Ok(())
        }
        None => Err(ConfigError::BadOverride(spec.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let config = PipelineConfig::from_toml("", &[]).unwrap();
        assert_eq!(config, PipelineConfig::default());
        assert!(config.validate().is_ok());
    }

    #[test]
    fn digest_changes_with_content() {
        let a = PipelineConfig::from_toml("", &[]).unwrap();
        let b = PipelineConfig::from_toml("[dataset]\nseed = 7\n", &[]).unwrap();
        assert_eq!(a.digest(), PipelineConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let config = PipelineConfig::from_toml(
            "",
            &[
                "dataset.seed=99".to_string(),
                "filter.target_positive_rate=0.25".to_string(),
                "labeler.mode=record".to_string(),
                "paths.work_dir=/tmp/w".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(config.dataset.seed, 99);
        assert_eq!(config.filter.target_positive_rate, 0.25);
        assert_eq!(config.labeler.mode, ClientMode::Record);
        assert_eq!(config.paths.work_dir, PathBuf::from("/tmp/w"));
    }

    #[test]
    fn validation_lists_all_violations() {
        let err = PipelineConfig::from_toml(
            "[corpus]\nwindow_size = 4\n[filter]\ntarget_positive_rate = 2.0\n[labeler]\nretry_max = 0\n",
            &[],
        )
        .unwrap_err();
        match err {
            ConfigError::Invalid(v) => assert_eq!(v.len(), 3),
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_toml("[corpus]\nwindowsize = 5\n", &[]).is_err());
    }

    #[test]
    fn bad_override_shape() {
        assert!(matches!(
            PipelineConfig::from_toml("", &["no_equals_sign".to_string()]),
            Err(ConfigError::BadOverride(_))
        ));
    }
}
