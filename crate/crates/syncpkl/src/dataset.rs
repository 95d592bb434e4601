//! Dataset assembly: head-variant, tail-variant, and combined datasets with
//! schema validation, digested manifests, dialogue-level splits, and stats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{serialize_context, Relation, CONTEXT_FORMAT_VERSION};
use crate::labeler::combine_labels;
use crate::llm::write_atomic;
use crate::pairing::{CandidateExample, Verdict};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const PIPELINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    HeadVariant,
    TailVariant,
    Combined,
}

impl DatasetVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetVariant::HeadVariant => "head_variant",
            DatasetVariant::TailVariant => "tail_variant",
            DatasetVariant::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dialogue_id: String,
    pub target_index: usize,
    pub template_id: Option<String>,
    pub model_id: Option<String>,
    pub filter_head_score: Option<f64>,
    pub filter_tail_score: Option<f64>,
    pub soft_label: Option<bool>,
    pub pipeline_version: String,
    pub context_format: String,
}

/// One finalized dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynCPKLExample {
    pub example_id: String,
    pub context: String,
    pub head: String,
    pub relation: Relation,
    pub tail: String,
    pub label: bool,
    pub variant: DatasetVariant,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema violation at record {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("digest mismatch for {path}: manifest {expected}, file {actual}")]
    DigestMismatch { path: String, expected: String, actual: String },
    #[error("missing manifest for {0}")]
    MissingManifest(String),
    #[error("split fractions must be positive and sum to 1, got {0} and {1}")]
    InvalidFractions(f64, f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainPolicy {
    /// Excluded and counted, so dataset-size discrepancies stay explainable.
    #[default]
    Exclude,
    /// Map abstain to a negative label instead of excluding.
    AsNegative,
}

/// Annotation context carried into provenance fields.
#[derive(Debug, Clone, Default)]
pub struct AssemblyInfo {
    pub template_id: Option<String>,
    pub model_id: Option<String>,
}

#[derive(Debug, Default)]
pub struct AssembleOutcome {
    pub examples: Vec<SynCPKLExample>,
    pub abstain_excluded: usize,
}

/// Projects annotated candidates into one dataset variant. Head-variant
/// labels come from head verdicts, tail-variant from tail verdicts, combined
/// from the AND rule. Example ids equal candidate ids across variants.
pub fn assemble(
    candidates: &[CandidateExample],
    variant: DatasetVariant,
    abstain_policy: AbstainPolicy,
    info: &AssemblyInfo,
) -> AssembleOutcome {
    let mut out = AssembleOutcome::default();
    for cand in candidates {
        let label = match variant {
            DatasetVariant::HeadVariant => verdict_label(cand.llm_head_label, abstain_policy),
            DatasetVariant::TailVariant => verdict_label(cand.llm_tail_label, abstain_policy),
            DatasetVariant::Combined => match (cand.llm_head_label, cand.llm_tail_label) {
                (Some(h), Some(t)) => {
                    let combined = combine_labels(h, t);
                    if combined.decided {
                        Some(combined.final_label)
                    } else if abstain_policy == AbstainPolicy::AsNegative {
                        Some(false)
                    } else {
                        None
                    }
                }
                _ => None,
            },
        };
        match label {
            Some(label) => out.examples.push(SynCPKLExample {
                example_id: cand.candidate_id.clone(),
                context: serialize_context(&cand.window),
                head: cand.fact.head.clone(),
                relation: cand.fact.relation,
                tail: cand.fact.tail.clone(),
                label,
                variant,
                provenance: Provenance {
                    dialogue_id: cand.window.dialogue_id.clone(),
                    target_index: cand.window.target_index,
                    template_id: info.template_id.clone(),
                    model_id: info.model_id.clone(),
                    filter_head_score: cand.filter_head_score,
                    filter_tail_score: cand.filter_tail_score,
                    soft_label: cand.soft_label,
                    pipeline_version: PIPELINE_VERSION.to_string(),
                    context_format: CONTEXT_FORMAT_VERSION.to_string(),
                },
            }),
            None => out.abstain_excluded += 1,
        }
    }
    out
}

fn verdict_label(verdict: Option<Verdict>, policy: AbstainPolicy) -> Option<bool> {
    match verdict {
        Some(Verdict::Yes) => Some(true),
        Some(Verdict::No) => Some(false),
        Some(Verdict::Abstain) => match policy {
            AbstainPolicy::Exclude => None,
            AbstainPolicy::AsNegative => Some(false),
        },
        None => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub count: usize,
    /// SHA-256 of the dataset file bytes.
    pub content_digest: String,
    /// Digest of the resolved pipeline config that produced the file.
    #[serde(default)]
    pub config_digest: Option<String>,
}

pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let mut os = dataset_path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn validate_example(ex: &SynCPKLExample, index: usize) -> Result<(), DatasetError> {
    for (field, value) in [
        ("example_id", &ex.example_id),
        ("context", &ex.context),
        ("head", &ex.head),
        ("tail", &ex.tail),
    ] {
        if value.trim().is_empty() {
            return Err(DatasetError::Schema {
                index,
                message: format!("empty {field}"),
            });
        }
    }
    Ok(())
}

/// Writes examples as newline-delimited records plus a digest manifest
/// sidecar. Write is atomic (write-then-rename).
pub fn write_dataset(
    examples: &[SynCPKLExample],
    destination: &Path,
    config_digest: Option<String>,
) -> Result<Manifest, DatasetError> {
    let mut body = String::new();
    for (i, ex) in examples.iter().enumerate() {
        validate_example(ex, i)?;
        body.push_str(&serde_json::to_string(ex).expect("example serializes"));
        body.push('\n');
    }
    write_atomic(destination, body.as_bytes())?;
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        count: examples.len(),
        content_digest: sha256_hex(body.as_bytes()),
        config_digest,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path(destination), &manifest_bytes)?;
    Ok(manifest)
}

/// Reads a dataset, validating the manifest digest and per-record schema.
pub fn read_dataset(source: &Path) -> Result<(Vec<SynCPKLExample>, Manifest), DatasetError> {
    let mpath = manifest_path(source);
    let manifest: Manifest = serde_json::from_slice(
        &fs::read(&mpath).map_err(|_| DatasetError::MissingManifest(mpath.display().to_string()))?,
    )
    .map_err(|e| DatasetError::Schema { index: 0, message: format!("manifest: {e}") })?;
    let bytes = fs::read(source)?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.content_digest {
        return Err(DatasetError::DigestMismatch {
            path: source.display().to_string(),
            expected: manifest.content_digest,
            actual,
        });
    }
    let text = String::from_utf8(bytes)
        .map_err(|e| DatasetError::Schema { index: 0, message: e.to_string() })?;
    let mut examples = Vec::with_capacity(manifest.count);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: SynCPKLExample = serde_json::from_str(line)
            .map_err(|e| DatasetError::Schema { index: i, message: e.to_string() })?;
        validate_example(&ex, i)?;
        examples.push(ex);
    }
    if examples.len() != manifest.count {
        return Err(DatasetError::Schema {
            index: examples.len(),
            message: format!("manifest count {} but read {}", manifest.count, examples.len()),
        });
    }
    Ok((examples, manifest))
}

/// Deterministic dialogue-level split: all windows from one dialogue land in
/// the same side, preventing context leakage between train and validation.
pub fn split(
    examples: &[SynCPKLExample],
    train_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<SynCPKLExample>, Vec<SynCPKLExample>), DatasetError> {
    if !(train_fraction > 0.0
        && validation_fraction > 0.0
        && (train_fraction + validation_fraction - 1.0).abs() < 1e-9)
    {
        return Err(DatasetError::InvalidFractions(train_fraction, validation_fraction));
    }
    let mut dialogue_ids: Vec<String> = Vec::new();
    for ex in examples {
        if !dialogue_ids.contains(&ex.provenance.dialogue_id) {
            dialogue_ids.push(ex.provenance.dialogue_id.clone());
        }
    }
    dialogue_ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dialogue_ids.shuffle(&mut rng);
    let n_train = ((dialogue_ids.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(dialogue_ids.len());
    let train_ids: std::collections::HashSet<&String> =
        dialogue_ids[..n_train].iter().collect();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for ex in examples {
        if train_ids.contains(&ex.provenance.dialogue_id) {
            train.push(ex.clone());
        } else {
            validation.push(ex.clone());
        }
    }
    Ok((train, validation))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub example_count: usize,
    pub positive_rate: f64,
    pub per_relation_counts: BTreeMap<Relation, LabelCounts>,
    pub abstain_excluded: usize,
}

pub fn stats(examples: &[SynCPKLExample], abstain_excluded: usize) -> DatasetStats {
    let mut per_relation: BTreeMap<Relation, LabelCounts> = BTreeMap::new();
    let mut positives = 0usize;
    for ex in examples {
        let entry = per_relation.entry(ex.relation).or_default();
        if ex.label {
            entry.positives += 1;
            positives += 1;
        } else {
            entry.negatives += 1;
        }
    }
    DatasetStats {
        example_count: examples.len(),
        positive_rate: positives as f64 / (examples.len().max(1)) as f64,
        per_relation_counts: per_relation,
        abstain_excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize_fact, DialogueWindow, SpeakerId, Utterance};
    use crate::pairing::{CandidateSource, CANDIDATE_SCHEMA_VERSION};

    fn candidate(
        id: &str,
        dialogue_id: &str,
        head: Option<Verdict>,
        tail: Option<Verdict>,
    ) -> CandidateExample {
        CandidateExample {
            schema_version: CANDIDATE_SCHEMA_VERSION,
            candidate_id: id.to_string(),
            window: DialogueWindow {
                dialogue_id: dialogue_id.to_string(),
                utterances: vec![Utterance {
                    speaker: SpeakerId::SpeakerA,
                    index: 0,
                    text: format!("utterance of {id}"),
                }],
                target_index: 0,
                target_speaker: SpeakerId::SpeakerA,
            },
            fact: normalize_fact("a singer", "characteristic", "good at singing").unwrap(),
            source: CandidateSource::OwnSpeaker,
            heuristic_label: true,
            shared_fact: false,
            filter_head_score: Some(0.5),
            filter_tail_score: Some(0.5),
            scoring_failed: false,
            soft_label: Some(true),
            llm_head_label: head,
            llm_tail_label: tail,
            final_label: None,
        }
    }

    fn example(id: &str, dialogue_id: &str, label: bool) -> SynCPKLExample {
        let cands = [candidate(
            id,
            dialogue_id,
            Some(if label { Verdict::Yes } else { Verdict::No }),
            Some(Verdict::Yes),
        )];
        assemble(&cands, DatasetVariant::HeadVariant, AbstainPolicy::default(), &AssemblyInfo::default())
            .examples
            .remove(0)
    }

    #[test]
    fn assemble_projects_variants() {
        let cands = vec![
            candidate("c1", "d1", Some(Verdict::Yes), Some(Verdict::Yes)),
            candidate("c2", "d1", Some(Verdict::Yes), Some(Verdict::No)),
            candidate("c3", "d1", Some(Verdict::Abstain), Some(Verdict::Yes)),
        ];
        let info = AssemblyInfo::default();
        let head = assemble(&cands, DatasetVariant::HeadVariant, AbstainPolicy::Exclude, &info);
        let tail = assemble(&cands, DatasetVariant::TailVariant, AbstainPolicy::Exclude, &info);
        let combined = assemble(&cands, DatasetVariant::Combined, AbstainPolicy::Exclude, &info);

        assert_eq!(head.examples.len(), 2);
        assert_eq!(head.abstain_excluded, 1);
        assert_eq!(tail.examples.len(), 3);
        assert_eq!(combined.examples.len(), 2);
        assert_eq!(combined.abstain_excluded, 1);

        // (yes, yes) -> true; (yes, no) -> head true, tail false, combined false
        assert!(combined.examples[0].label);
        assert!(!combined.examples[1].label);
        assert!(head.examples.iter().all(|e| e.label));
        assert_eq!(tail.examples[1].label, false);
        // c3 present in tail, absent from head and combined
        assert!(tail.examples.iter().any(|e| e.example_id == "c3"));
        assert!(!head.examples.iter().any(|e| e.example_id == "c3"));
        assert!(!combined.examples.iter().any(|e| e.example_id == "c3"));
    }

    #[test]
    fn abstain_as_negative_policy() {
        let cands = vec![candidate("c1", "d1", Some(Verdict::Abstain), Some(Verdict::Yes))];
        let out = assemble(
            &cands,
            DatasetVariant::Combined,
            AbstainPolicy::AsNegative,
            &AssemblyInfo::default(),
        );
        assert_eq!(out.examples.len(), 1);
        assert!(!out.examples[0].label);
        assert_eq!(out.abstain_excluded, 0);
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ndjson");
        let examples: Vec<_> =
            (0..100).map(|i| example(&format!("e{i}"), &format!("d{}", i / 10), i % 3 == 0)).collect();
        let manifest = write_dataset(&examples, &path, None).unwrap();
        assert_eq!(manifest.count, 100);
        let (back, manifest2) = read_dataset(&path).unwrap();
        assert_eq!(back, examples);
        assert_eq!(manifest, manifest2);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ndjson");
        let manifest = write_dataset(&[], &path, None).unwrap();
        assert_eq!(manifest.count, 0);
        let (back, _) = read_dataset(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn tampered_byte_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.ndjson");
        write_dataset(&[example("e1", "d1", true)], &path, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let i = bytes.len() / 2;
        bytes[i] = bytes[i].wrapping_add(1);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::DigestMismatch { .. })));
    }

    #[test]
    fn split_is_dialogue_level_and_deterministic() {
        let examples: Vec<_> = (0..100)
            .map(|i| example(&format!("e{i}"), &format!("d{}", i % 10), i % 2 == 0))
            .collect();
        let (train, valid) = split(&examples, 0.8, 0.2, 42).unwrap();
        let train_d: std::collections::HashSet<_> =
            train.iter().map(|e| e.provenance.dialogue_id.clone()).collect();
        let valid_d: std::collections::HashSet<_> =
            valid.iter().map(|e| e.provenance.dialogue_id.clone()).collect();
        assert_eq!(train_d.len(), 8);
        assert_eq!(valid_d.len(), 2);
        assert!(train_d.is_disjoint(&valid_d));

        let (train2, valid2) = split(&examples, 0.8, 0.2, 42).unwrap();
        assert_eq!(train, train2);
        assert_eq!(valid, valid2);

        // Different seed: still dialogue-level, (almost surely) different.
        let (train3, valid3) = split(&examples, 0.8, 0.2, 7).unwrap();
        let t3: std::collections::HashSet<_> =
            train3.iter().map(|e| e.provenance.dialogue_id.clone()).collect();
        let v3: std::collections::HashSet<_> =
            valid3.iter().map(|e| e.provenance.dialogue_id.clone()).collect();
        assert!(t3.is_disjoint(&v3));
        assert_eq!(train3.len() + valid3.len(), examples.len());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let examples = vec![example("e", "d", true)];
        assert!(split(&examples, 0.8, 0.1, 0).is_err());
        assert!(split(&examples, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn stats_counts() {
        let s = stats(&[], 0);
        assert_eq!(s.example_count, 0);
        assert_eq!(s.positive_rate, 0.0);

        let examples = vec![
            example("e1", "d1", true),
            example("e2", "d1", true),
            example("e3", "d1", true),
            example("e4", "d1", false),
        ];
        let s = stats(&examples, 2);
        assert_eq!(s.example_count, 4);
        assert_eq!(s.positive_rate, 0.75);
        assert_eq!(s.abstain_excluded, 2);
        let total: usize = s
            .per_relation_counts
            .values()
            .map(|c| c.positives + c.negatives)
            .sum();
        assert_eq!(total, s.example_count);
    }
}
