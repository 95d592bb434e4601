//! Evaluation: F1/accuracy overall and per relation, table-shaped reports,
//! and seeded error sampling for manual categorization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Relation;
use crate::llm::write_atomic;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions and gold differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty inputs")]
    Empty,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("review file record {index}: {message}")]
    Review { index: usize, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsFragment {
    pub confusion: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when tp+fp or tp+fn was zero and the affected ratio was defined 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricsFragment,
    pub per_relation: BTreeMap<Relation, MetricsFragment>,
    /// Relations with zero examples, omitted from per_relation.
    pub omitted_relations: Vec<Relation>,
    pub run_label: String,
}

/// Confusion-matrix metrics with the linked (true) class as positive.
/// Degenerate ratios (no predicted or no gold positives) are defined 0 and
/// flagged.
pub fn compute_metrics(predictions: &[bool], gold: &[bool]) -> Result<MetricsFragment, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), gold.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(metrics_from_confusion(c))
}

pub fn metrics_from_confusion(c: ConfusionCounts) -> MetricsFragment {
    let degenerate = c.tp + c.fp == 0 || c.tp + c.fn_ == 0;
    let precision = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    MetricsFragment { confusion: c, precision, recall, f1, accuracy, degenerate }
}

/// One evaluated example: relation, predicted label, gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvaluatedExample {
    pub relation: Relation,
    pub predicted: bool,
    pub gold: bool,
}

/// Partitions by relation, computing metrics per partition plus overall.
/// Empty partitions are listed in `omitted_relations`.
pub fn per_relation_metrics(
    examples: &[EvaluatedExample],
    run_label: &str,
) -> Result<MetricsReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    let predictions: Vec<bool> = examples.iter().map(|e| e.predicted).collect();
    let gold: Vec<bool> = examples.iter().map(|e| e.gold).collect();
    let overall = compute_metrics(&predictions, &gold)?;
    let mut per_relation = BTreeMap::new();
    let mut omitted = Vec::new();
    for relation in Relation::ALL {
        let (p, g): (Vec<bool>, Vec<bool>) = examples
            .iter()
            .filter(|e| e.relation == relation)
            .map(|e| (e.predicted, e.gold))
            .unzip();
        if p.is_empty() {
            omitted.push(relation);
        } else {
            per_relation.insert(relation, compute_metrics(&p, &g)?);
        }
    }
    Ok(MetricsReport {
        overall,
        per_relation,
        omitted_relations: omitted,
        run_label: run_label.to_string(),
    })
}

/// The error taxonomy used for manual categorization of sampled errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    OverRelianceHead,
    ImplicitHeadConditionalTail,
    AmbiguousImplication,
    DataQuality,
    ModelError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub example_id: String,
    pub context: String,
    pub fact: String,
    pub gold: bool,
    pub predicted: bool,
    /// Filled in by a human reviewer; left empty on emission.
    pub category: Option<ErrorCategory>,
    pub annotator_note: Option<String>,
}

/// Input record for error sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub example_id: String,
    pub context: String,
    pub fact: String,
    pub gold: bool,
    pub predicted: bool,
}

/// Uniform sample without replacement from the misclassified examples,
/// deterministic by seed. Fewer than n errors returns all of them.
pub fn sample_errors(records: &[PredictionRecord], n: usize, seed: u64) -> Vec<ErrorSample> {
    let mut errors: Vec<&PredictionRecord> =
        records.iter().filter(|r| r.gold != r.predicted).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    errors.shuffle(&mut rng);
    errors
        .into_iter()
        .take(n)
        .map(|r| ErrorSample {
            example_id: r.example_id.clone(),
            context: r.context.clone(),
            fact: r.fact.clone(),
            gold: r.gold,
            predicted: r.predicted,
            category: None,
            annotator_note: None,
        })
        .collect()
}

/// Emits the review file (newline-delimited, category fields empty).
pub fn write_review_file(samples: &[ErrorSample], path: &Path) -> Result<(), EvalError> {
    let mut body = String::new();
    for s in samples {
        body.push_str(&serde_json::to_string(s).expect("sample serializes"));
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())?;
    Ok(())
}

/// Re-ingests an annotated review file and tallies category frequencies.
/// Returns (category -> count, uncategorized count).
pub fn category_frequency(path: &Path) -> Result<(BTreeMap<ErrorCategory, usize>, usize), EvalError> {
    let text = fs::read_to_string(path)?;
    let mut counts: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    let mut uncategorized = 0;
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: ErrorSample = serde_json::from_str(line)
            .map_err(|e| EvalError::Review { index, message: e.to_string() })?;
        match sample.category {
            Some(c) => *counts.entry(c).or_default() += 1,
            None => uncategorized += 1,
        }
    }
    Ok((counts, uncategorized))
}

/// Human-readable report: one row per run (feature flags, F1, accuracy) and
/// one row per relation, matching the shape of the published comparison
/// tables.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run: {}", report.run_label);
    let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>10} {:>10}", "scope", "f1", "acc", "precision", "recall");
    let m = &report.overall;
    let _ = writeln!(
        out,
        "{:<16} {:>8.4} {:>8.4} {:>10.4} {:>10.4}{}",
        "overall",
        m.f1,
        m.accuracy,
        m.precision,
        m.recall,
        if m.degenerate { "  (degenerate)" } else { "" }
    );
    for (relation, m) in &report.per_relation {
        let _ = writeln!(
            out,
            "{:<16} {:>8.4} {:>8.4} {:>10.4} {:>10.4}{}",
            relation.as_str(),
            m.f1,
            m.accuracy,
            m.precision,
            m.recall,
            if m.degenerate { "  (degenerate)" } else { "" }
        );
    }
    for relation in &report.omitted_relations {
        let _ = writeln!(out, "{:<16} (no examples)", relation.as_str());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let m = compute_metrics(&[true; 4], &[true; 4]).unwrap();
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn hand_computed_confusion() {
        // tp=2, fp=1, fn=1, tn=6
        let predictions = [true, true, true, false, false, false, false, false, false, false];
        let gold = [true, true, false, true, false, false, false, false, false, false];
        let m = compute_metrics(&predictions, &gold).unwrap();
        assert_eq!(m.confusion, ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 6 });
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 0.8).abs() < 1e-12);
    }

    #[test]
    fn degenerate_no_positives() {
        let m = compute_metrics(&[false; 5], &[false; 5]).unwrap();
        assert_eq!(m.f1, 0.0);
        assert!(m.degenerate);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn metric_input_errors() {
        assert!(matches!(compute_metrics(&[true], &[]), Err(EvalError::LengthMismatch(1, 0))));
        assert!(matches!(compute_metrics(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn per_relation_partitions_sum_to_overall() {
        let examples: Vec<EvaluatedExample> = (0..40)
            .map(|i| EvaluatedExample {
                relation: if i % 2 == 0 { Relation::Experience } else { Relation::GoalPlan },
                predicted: i % 3 == 0,
                gold: i % 5 == 0,
            })
            .collect();
        let report = per_relation_metrics(&examples, "test").unwrap();
        let mut summed = ConfusionCounts::default();
        for m in report.per_relation.values() {
            summed.add(&m.confusion);
        }
        assert_eq!(summed, report.overall.confusion);
        assert_eq!(report.omitted_relations.len(), 3);

        // independent recount of one partition
        let goal: Vec<_> = examples.iter().filter(|e| e.relation == Relation::GoalPlan).collect();
        let p: Vec<bool> = goal.iter().map(|e| e.predicted).collect();
        let g: Vec<bool> = goal.iter().map(|e| e.gold).collect();
        assert_eq!(report.per_relation[&Relation::GoalPlan], compute_metrics(&p, &g).unwrap());
    }

    #[test]
    fn single_relation_matches_overall() {
        let examples: Vec<EvaluatedExample> = (0..10)
            .map(|i| EvaluatedExample {
                relation: Relation::Characteristic,
                predicted: i % 2 == 0,
                gold: i % 3 == 0,
            })
            .collect();
        let report = per_relation_metrics(&examples, "single").unwrap();
        assert_eq!(report.per_relation[&Relation::Characteristic], report.overall);
    }

    fn records(n_errors: usize, n_correct: usize) -> Vec<PredictionRecord> {
        let mut out = Vec::new();
        for i in 0..n_errors {
            out.push(PredictionRecord {
                example_id: format!("err{i}"),
                context: "ctx".to_string(),
                fact: "fact".to_string(),
                gold: true,
                predicted: false,
            });
        }
        for i in 0..n_correct {
            out.push(PredictionRecord {
                example_id: format!("ok{i}"),
                context: "ctx".to_string(),
                fact: "fact".to_string(),
                gold: true,
                predicted: true,
            });
        }
        out
    }

    #[test]
    fn sample_errors_deterministic_subset() {
        let population = records(328, 100);
        let s1 = sample_errors(&population, 50, 9);
        let s2 = sample_errors(&population, 50, 9);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 50);
        assert!(s1.iter().all(|s| s.gold != s.predicted));

        let s3 = sample_errors(&population, 50, 10);
        assert_ne!(s1, s3);
    }

    #[test]
    fn sample_errors_edge_cases() {
        assert!(sample_errors(&records(0, 10), 50, 0).is_empty());
        assert_eq!(sample_errors(&records(10, 0), 50, 0).len(), 10);
    }

    #[test]
    fn review_file_roundtrip_and_tally() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.ndjson");
        let mut samples = sample_errors(&records(5, 0), 5, 1);
        write_review_file(&samples, &path).unwrap();
        let (counts, uncategorized) = category_frequency(&path).unwrap();
        assert!(counts.is_empty());
        assert_eq!(uncategorized, 5);

        samples[0].category = Some(ErrorCategory::DataQuality);
        samples[1].category = Some(ErrorCategory::ModelError);
        samples[2].category = Some(ErrorCategory::ModelError);
        write_review_file(&samples, &path).unwrap();
        let (counts, uncategorized) = category_frequency(&path).unwrap();
        assert_eq!(counts[&ErrorCategory::ModelError], 2);
        assert_eq!(counts[&ErrorCategory::DataQuality], 1);
        assert_eq!(uncategorized, 2);
    }
}
