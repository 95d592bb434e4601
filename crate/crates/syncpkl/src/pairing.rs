//! Heuristic candidate pairing: own-speaker facts become soft positives,
//! other-speaker facts soft negatives, with shared-fact collision handling.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, DialogueWindow, PersonaFact, PersonaProfile};

pub const CANDIDATE_SCHEMA_VERSION: u32 = 1;

/// What to do with a fact that appears in both speakers' profiles.
///
/// The heuristic would mislabel such a fact as negative for the other
/// speaker; the default drops it from the negative side. `KeepForLlm`
/// keeps the pair and leaves the call to the LLM labeler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedFactPolicy {
    #[default]
    ExcludeFromNegatives,
    KeepForLlm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairingPolicy {
    #[serde(default)]
    pub shared_fact_policy: SharedFactPolicy,
    /// Optional cap on other-speaker candidates per window, for cost control.
    /// Applied in profile fact order, deterministically.
    #[serde(default)]
    pub max_negatives_per_window: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    OwnSpeaker,
    OtherSpeaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Abstain,
}

/// A (window, fact) pair carrying heuristic, filter, LLM, and final labels
/// through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateExample {
    pub schema_version: u32,
    /// Content hash of dialogue_id + target_index + normalized fact; stable
    /// across runs for identical content.
    pub candidate_id: String,
    pub window: DialogueWindow,
    pub fact: PersonaFact,
    pub source: CandidateSource,
    pub heuristic_label: bool,
    pub shared_fact: bool,
    #[serde(default)]
    pub filter_head_score: Option<f64>,
    #[serde(default)]
    pub filter_tail_score: Option<f64>,
    #[serde(default)]
    pub scoring_failed: bool,
    #[serde(default)]
    pub soft_label: Option<bool>,
    #[serde(default)]
    pub llm_head_label: Option<Verdict>,
    #[serde(default)]
    pub llm_tail_label: Option<Verdict>,
    #[serde(default)]
    pub final_label: Option<bool>,
}

/// Stable content id over (dialogue_id, target_index, normalized fact).
pub fn candidate_id(dialogue_id: &str, target_index: usize, fact: &PersonaFact) -> String {
    let (head, relation, tail) = fact.normalized_key();
    let mut hasher = Sha256::new();
    hasher.update(dialogue_id.as_bytes());
    hasher.update([0]);
    hasher.update(target_index.to_string().as_bytes());
    hasher.update([0]);
    hasher.update(head.as_bytes());
    hasher.update([0]);
    hasher.update(relation.as_bytes());
    hasher.update([0]);
    hasher.update(tail.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(32);
    for b in &digest[..16] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Intersection of the two profiles' facts under normalized equality.
pub fn detect_shared_facts(
    profile_a: &PersonaProfile,
    profile_b: &PersonaProfile,
) -> HashSet<PersonaFact> {
    let b: HashSet<&PersonaFact> = profile_b.facts.iter().collect();
    profile_a
        .facts
        .iter()
        .filter(|f| b.contains(f))
        .cloned()
        .collect()
}

/// For each window: one candidate per target-speaker fact (own_speaker) and
/// one per other-speaker fact (other_speaker), subject to the shared-fact
/// policy and the per-window negative cap.
pub fn build_candidates(
    dialogue: &Dialogue,
    windows: &[DialogueWindow],
    policy: &PairingPolicy,
) -> Vec<CandidateExample> {
    let shared = detect_shared_facts(&dialogue.profiles[0], &dialogue.profiles[1]);
    let mut out = Vec::new();
    for window in windows {
        debug_assert_eq!(window.dialogue_id, dialogue.dialogue_id);
        let own = dialogue.profile(window.target_speaker);
        let other = dialogue.profile(window.target_speaker.other());
        for fact in &own.facts {
            out.push(make_candidate(window, fact, CandidateSource::OwnSpeaker, &shared));
        }
        let mut negatives = 0usize;
        for fact in &other.facts {
            let is_shared = shared.contains(fact);
            if is_shared && policy.shared_fact_policy == SharedFactPolicy::ExcludeFromNegatives {
                continue;
            }
            if let Some(cap) = policy.max_negatives_per_window {
                if negatives >= cap {
                    break;
                }
            }
            negatives += 1;
            out.push(make_candidate(window, fact, CandidateSource::OtherSpeaker, &shared));
        }
    }
    out
}

fn make_candidate(
    window: &DialogueWindow,
    fact: &PersonaFact,
    source: CandidateSource,
    shared: &HashSet<PersonaFact>,
) -> CandidateExample {
    CandidateExample {
        schema_version: CANDIDATE_SCHEMA_VERSION,
        candidate_id: candidate_id(&window.dialogue_id, window.target_index, fact),
        window: window.clone(),
        fact: fact.clone(),
        source,
        heuristic_label: source == CandidateSource::OwnSpeaker,
        shared_fact: shared.contains(fact),
        filter_head_score: None,
        filter_tail_score: None,
        scoring_failed: false,
        soft_label: None,
        llm_head_label: None,
        llm_tail_label: None,
        final_label: None,
    }
}
