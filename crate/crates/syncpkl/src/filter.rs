//! Baseline relevance filtering: a pluggable scorer, quantile threshold
//! calibration, and balanced soft labels.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::serialize_context;
use crate::pairing::CandidateExample;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("scorer returned out-of-range score {0}")]
    ScoreOutOfRange(f64),
    #[error("empty score list")]
    EmptyScores,
    #[error("target_positive_rate must be in (0, 1), got {0}")]
    InvalidTargetRate(f64),
    #[error("scorer failure: {0}")]
    ScorerFailure(String),
}

/// The scoring boundary: maps (context text, fact text) to a probability.
/// Implementations may be in-process, a subprocess, or a network service.
pub trait Scorer: Send + Sync {
    fn score(&self, context: &str, fact: &str) -> Result<f64, FilterError>;

    /// Whether concurrent calls are safe; the pipeline serializes otherwise.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Lexical-overlap reference scorer: fraction of the fact's tokens that
/// appear in the context, so the pipeline runs with no model dependency.
/// A trained-encoder scorer plugs in through the same contract.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalOverlapScorer;

fn tokens(text: &str) -> HashSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl Scorer for LexicalOverlapScorer {
    fn score(&self, context: &str, fact: &str) -> Result<f64, FilterError> {
        let fact_tokens = tokens(fact);
        if fact_tokens.is_empty() {
            return Ok(0.0);
        }
        let ctx_tokens = tokens(context);
        let common = fact_tokens.intersection(&ctx_tokens).count();
        Ok(common as f64 / fact_tokens.len() as f64)
    }
}

/// Network scorer: POST {"context", "fact"} to an endpoint, expect
/// {"score": number}. Retries transient failures with linear backoff.
pub struct HttpScorer {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_attempts: u32,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    context: &'a str,
    fact: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl Scorer for HttpScorer {
    fn score(&self, context: &str, fact: &str) -> Result<f64, FilterError> {
        let mut last_err = String::new();
        for attempt in 0..self.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 * attempt as u64));
            }
            let result = ureq::post(&self.endpoint)
                .timeout(self.timeout)
                .send_json(ScoreRequest { context, fact });
            match result {
                Ok(resp) => {
                    let body: ScoreResponse = resp
                        .into_json()
                        .map_err(|e| FilterError::ScorerFailure(e.to_string()))?;
                    return Ok(body.score);
                }
                Err(ureq::Error::Status(code, _)) if (500..600).contains(&code) || code == 429 => {
                    last_err = format!("status {code}");
                }
                Err(ureq::Error::Transport(t)) => last_err = t.to_string(),
                Err(e) => return Err(FilterError::ScorerFailure(e.to_string())),
            }
        }
        Err(FilterError::ScorerFailure(format!(
            "exhausted {} attempts: {last_err}",
            self.max_attempts.max(1)
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub head: bool,
    pub tail: bool,
}

impl Default for ScoreParts {
    fn default() -> Self {
        ScoreParts { head: true, tail: true }
    }
}

/// Populates filter scores on each candidate, using the serialized window as
/// context and the fact head (resp. tail) as fact text. Already-populated
/// scores are kept unless `rescore` is set. A per-candidate scorer failure
/// flags the candidate `scoring_failed`; an out-of-range score is a hard
/// contract violation.
pub fn score_candidates(
    candidates: &mut [CandidateExample],
    scorer: &dyn Scorer,
    parts: ScoreParts,
    rescore: bool,
) -> Result<(), FilterError> {
    for cand in candidates.iter_mut() {
        let context = serialize_context(&cand.window);
        if parts.head && (rescore || cand.filter_head_score.is_none()) {
            match scorer.score(&context, &cand.fact.head) {
                Ok(s) => {
                    check_range(s)?;
                    cand.filter_head_score = Some(s);
                }
                Err(FilterError::ScoreOutOfRange(s)) => return Err(FilterError::ScoreOutOfRange(s)),
                Err(_) => {
                    cand.scoring_failed = true;
                    continue;
                }
            }
        }
        if parts.tail && (rescore || cand.filter_tail_score.is_none()) {
            match scorer.score(&context, &cand.fact.tail) {
                Ok(s) => {
                    check_range(s)?;
                    cand.filter_tail_score = Some(s);
                }
                Err(FilterError::ScoreOutOfRange(s)) => return Err(FilterError::ScoreOutOfRange(s)),
                Err(_) => {
                    cand.scoring_failed = true;
                    continue;
                }
            }
        }
    }
    Ok(())
}

fn check_range(s: f64) -> Result<(), FilterError> {
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(FilterError::ScoreOutOfRange(s));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub achieved_positive_rate: f64,
    pub target_positive_rate: f64,
    pub sample_size: usize,
}

/// Picks the threshold as the k-th largest score, k = round(target * n)
/// clamped to [1, n], under the convention that score >= threshold counts
/// positive. For n distinct values the achieved rate lands within 1/n of
/// the target.
pub fn calibrate_threshold(
    scores: &[f64],
    target_positive_rate: f64,
) -> Result<CalibrationResult, FilterError> {
    if scores.is_empty() {
        return Err(FilterError::EmptyScores);
    }
    if !(target_positive_rate > 0.0 && target_positive_rate < 1.0) {
        return Err(FilterError::InvalidTargetRate(target_positive_rate));
    }
    for &s in scores {
        check_range(s)?;
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let k = ((target_positive_rate * n as f64).round() as usize).clamp(1, n);
    let threshold = sorted[k - 1];
    let positives = scores.iter().filter(|&&s| s >= threshold).count();
    Ok(CalibrationResult {
        threshold,
        achieved_positive_rate: positives as f64 / n as f64,
        target_positive_rate,
        sample_size: n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelRule {
    #[default]
    BothParts,
    HeadOnly,
    TailOnly,
    Mean,
}

/// Assigns `soft_label` from filter scores and the calibrated threshold.
/// Candidates missing a required score keep `soft_label = None` and are
/// flagged `scoring_failed`.
pub fn apply_soft_labels(
    candidates: &mut [CandidateExample],
    calibration: &CalibrationResult,
    rule: SoftLabelRule,
) {
    let t = calibration.threshold;
    for cand in candidates.iter_mut() {
        let label = match rule {
            SoftLabelRule::BothParts => match (cand.filter_head_score, cand.filter_tail_score) {
                (Some(h), Some(tl)) => Some(h >= t && tl >= t),
                _ => None,
            },
            SoftLabelRule::HeadOnly => cand.filter_head_score.map(|h| h >= t),
            SoftLabelRule::TailOnly => cand.filter_tail_score.map(|tl| tl >= t),
            SoftLabelRule::Mean => match (cand.filter_head_score, cand.filter_tail_score) {
                (Some(h), Some(tl)) => Some((h + tl) / 2.0 >= t),
                _ => None,
            },
        };
        match label {
            Some(l) => cand.soft_label = Some(l),
            None => cand.scoring_failed = true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstScorer(f64);
    impl Scorer for ConstScorer {
        fn score(&self, _: &str, _: &str) -> Result<f64, FilterError> {
            Ok(self.0)
        }
    }

    struct FailOn<'a>(&'a str);
    impl Scorer for FailOn<'_> {
        fn score(&self, _: &str, fact: &str) -> Result<f64, FilterError> {
            if fact.contains(self.0) {
                Err(FilterError::ScorerFailure("boom".to_string()))
            } else {
                Ok(0.4)
            }
        }
    }

    fn candidates(n: usize) -> Vec<CandidateExample> {
        use crate::corpus::*;
        use crate::pairing::*;
        let facts: Vec<_> = (0..n)
            .map(|i| normalize_fact(&format!("head {i}"), "experience", &format!("tail {i}")).unwrap())
            .collect();
        let d = Dialogue {
            dialogue_id: "d".to_string(),
            utterances: vec![Utterance {
                speaker: SpeakerId::SpeakerA,
                index: 0,
                text: "hello".to_string(),
            }],
            profiles: [
                PersonaProfile {
                    speaker: SpeakerId::SpeakerA,
                    facts,
                    raw_lines: vec![],
                },
                PersonaProfile {
                    speaker: SpeakerId::SpeakerB,
                    facts: vec![],
                    raw_lines: vec![],
                },
            ],
        };
        let windows = extract_windows(&d, 5).unwrap();
        build_candidates(&d, &windows, &PairingPolicy::default())
    }

    #[test]
    fn constant_scorer_populates_all() {
        let mut cands = candidates(3);
        score_candidates(&mut cands, &ConstScorer(0.5), ScoreParts::default(), false).unwrap();
        for c in &cands {
            assert_eq!(c.filter_head_score, Some(0.5));
            assert_eq!(c.filter_tail_score, Some(0.5));
            assert!(!c.scoring_failed);
        }
    }

    #[test]
    fn out_of_range_is_hard_error() {
        let mut cands = candidates(1);
        let err = score_candidates(&mut cands, &ConstScorer(1.5), ScoreParts::default(), false);
        assert!(matches!(err, Err(FilterError::ScoreOutOfRange(_))));
    }

    #[test]
    fn failing_scorer_flags_candidate() {
        let mut cands = candidates(10);
        let scorer = FailOn("tail 7");
        score_candidates(&mut cands, &scorer, ScoreParts::default(), false).unwrap();
        let failed: Vec<_> = cands.iter().filter(|c| c.scoring_failed).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(cands.iter().filter(|c| !c.scoring_failed).count(), 9);
    }

    #[test]
    fn rescore_only_when_requested() {
        let mut cands = candidates(1);
        score_candidates(&mut cands, &ConstScorer(0.2), ScoreParts::default(), false).unwrap();
        score_candidates(&mut cands, &ConstScorer(0.9), ScoreParts::default(), false).unwrap();
        assert_eq!(cands[0].filter_head_score, Some(0.2));
        score_candidates(&mut cands, &ConstScorer(0.9), ScoreParts::default(), true).unwrap();
        assert_eq!(cands[0].filter_head_score, Some(0.9));
    }

    #[test]
    fn calibration_examples() {
        // Oracle: brute-force over all candidate thresholds with the >=
        // convention, picking the one whose rate lands closest to target.
        let scores = [0.1, 0.4, 0.6, 0.9];
        let cal = calibrate_threshold(&scores, 0.5).unwrap();
        assert_eq!(cal.threshold, 0.6);
        assert_eq!(cal.achieved_positive_rate, 0.5);

        let cal = calibrate_threshold(&scores, 0.25).unwrap();
        assert_eq!(cal.threshold, 0.9);
        assert_eq!(cal.achieved_positive_rate, 0.25);
    }

    #[test]
    fn calibration_degenerate_all_equal() {
        let scores = [0.7; 5];
        let cal = calibrate_threshold(&scores, 0.5).unwrap();
        assert_eq!(cal.threshold, 0.7);
        assert_eq!(cal.achieved_positive_rate, 1.0);
    }

    #[test]
    fn calibration_errors() {
        assert!(matches!(calibrate_threshold(&[], 0.5), Err(FilterError::EmptyScores)));
        assert!(calibrate_threshold(&[0.5], 0.0).is_err());
        assert!(calibrate_threshold(&[0.5], 1.0).is_err());
    }

    #[test]
    fn soft_label_rules() {
        let mut cands = candidates(1);
        cands[0].filter_head_score = Some(0.8);
        cands[0].filter_tail_score = Some(0.3);
        let cal = CalibrationResult {
            threshold: 0.6,
            achieved_positive_rate: 0.5,
            target_positive_rate: 0.5,
            sample_size: 4,
        };
        apply_soft_labels(&mut cands, &cal, SoftLabelRule::BothParts);
        assert_eq!(cands[0].soft_label, Some(false));
        apply_soft_labels(&mut cands, &cal, SoftLabelRule::HeadOnly);
        assert_eq!(cands[0].soft_label, Some(true));
        cands[0].filter_tail_score = Some(0.9);
        apply_soft_labels(&mut cands, &cal, SoftLabelRule::BothParts);
        assert_eq!(cands[0].soft_label, Some(true));
    }

    #[test]
    fn missing_scores_flagged() {
        let mut cands = candidates(1);
        cands[0].filter_head_score = Some(0.8);
        let cal = CalibrationResult {
            threshold: 0.5,
            achieved_positive_rate: 0.5,
            target_positive_rate: 0.5,
            sample_size: 4,
        };
        apply_soft_labels(&mut cands, &cal, SoftLabelRule::BothParts);
        assert_eq!(cands[0].soft_label, None);
        assert!(cands[0].scoring_failed);
    }

    #[test]
    fn lexical_scorer_range_and_overlap() {
        let s = LexicalOverlapScorer;
        assert_eq!(s.score("I love to sing", "sing").unwrap(), 1.0);
        assert_eq!(s.score("I love to sing", "play chess").unwrap(), 0.0);
        let half = s.score("I love to sing", "sing opera").unwrap();
        assert!((half - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_threshold() {
        let scores: Vec<f64> = (0..50).map(|i| (i as f64) / 49.0).collect();
        let mut prev = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let count = scores.iter().filter(|&&s| s >= t).count();
            assert!(count <= prev);
            prev = count;
        }
    }
}
