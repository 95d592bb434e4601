//! Chain-of-thought annotation: prompt rendering, verdict parsing, retry
//! handling with a resumable checkpoint, and the head∧tail combination rule.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{serialize_context, DialogueWindow, PersonaFact};
use crate::llm::{CompletionRequest, LlmClient, LlmError, Message, Role};
use crate::pairing::{CandidateExample, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Head,
    Tail,
}

/// Versioned prompt template. Template text is data, not code: the labeling
/// prompts were iterated during dataset construction and will be again.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub variant: Variant,
    pub system_text: String,
    /// Pattern with `{context}` and `{fact}` placeholders.
    pub user_text_pattern: String,
}

#[derive(Debug, Error)]
pub enum LabelerError {
    #[error("template error: residual placeholder {0} after rendering")]
    UnboundPlaceholder(String),
    #[error("template file {path}: {message}")]
    TemplateFile { path: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

const SYSTEM_TEXT: &str = "You are a careful annotator deciding whether a persona fact is \
relevant to the speaker marked <target> in a short dialogue excerpt. Reason step by step, \
then give a final verdict.";

const HEAD_USER_PATTERN: &str = "Dialogue window (the target speaker's utterance is marked \
with <target> tags):\n{context}\n\nPersona fact (head entity): {fact}\n\nDoes this persona \
fact apply to the target speaker in this dialogue? Think step by step about what the target \
speaker says and implies. Then finish with exactly one line: \"Answer: Yes\" or \"Answer: No\".";

const TAIL_USER_PATTERN: &str = "Dialogue window (the target speaker's utterance is marked \
with <target> tags):\n{context}\n\nPersona fact (attribute): {fact}\n\nDoes this persona \
fact apply to the target speaker in this dialogue? Think step by step about what the target \
speaker says and implies. Then finish with exactly one line: \"Answer: Yes\" or \"Answer: No\".";

impl PromptTemplate {
    pub fn cot_v1(variant: Variant) -> PromptTemplate {
        match variant {
            Variant::Head => PromptTemplate {
                template_id: "cot_v1_head".to_string(),
                variant,
                system_text: SYSTEM_TEXT.to_string(),
                user_text_pattern: HEAD_USER_PATTERN.to_string(),
            },
            Variant::Tail => PromptTemplate {
                template_id: "cot_v1_tail".to_string(),
                variant,
                system_text: SYSTEM_TEXT.to_string(),
                user_text_pattern: TAIL_USER_PATTERN.to_string(),
            },
        }
    }

    /// Template file layout: `key: value` front matter (template_id,
    /// variant), then `[system]` and `[user]` sections.
    pub fn from_file(path: &Path) -> Result<PromptTemplate, LabelerError> {
        let text = fs::read_to_string(path).map_err(|e| LabelerError::TemplateFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|message| LabelerError::TemplateFile {
            path: path.display().to_string(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<PromptTemplate, String> {
        let mut template_id = None;
        let mut variant = None;
        let mut section: Option<&str> = None;
        let mut system = String::new();
        let mut user = String::new();
        for line in text.lines() {
            match line.trim() {
                "[system]" => {
                    section = Some("system");
                    continue;
                }
                "[user]" => {
                    section = Some("user");
                    continue;
                }
                _ => {}
            }
            match section {
                None => {
                    if let Some((k, v)) = line.split_once(':') {
                        match k.trim() {
                            "template_id" => template_id = Some(v.trim().to_string()),
                            "variant" => {
                                variant = Some(match v.trim() {
                                    "head" => Variant::Head,
                                    "tail" => Variant::Tail,
                                    other => return Err(format!("unknown variant {other:?}")),
                                })
                            }
                            _ => {}
                        }
                    }
                }
                Some("system") => {
                    if !system.is_empty() {
                        system.push('\n');
                    }
                    system.push_str(line);
                }
                Some(_) => {
                    if !user.is_empty() {
                        user.push('\n');
                    }
                    user.push_str(line);
                }
            }
        }
        Ok(PromptTemplate {
            template_id: template_id.ok_or("missing template_id")?,
            variant: variant.ok_or("missing variant")?,
            system_text: system.trim().to_string(),
            user_text_pattern: user.trim().to_string(),
        })
    }

    pub fn to_file_text(&self) -> String {
        format!(
            "template_id: {}\nvariant: {}\n[system]\n{}\n[user]\n{}\n",
            self.template_id,
            match self.variant {
                Variant::Head => "head",
                Variant::Tail => "tail",
            },
            self.system_text,
            self.user_text_pattern
        )
    }
}

/// Model parameters the rendered requests carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RequestParams {
    fn default() -> Self {
        // Temperature 0 keeps labeling deterministic and replayable.
        RequestParams {
            model_id: "gpt-3.5-turbo".to_string(),
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// Renders a deterministic completion request. The head variant injects
/// fact.head into the `{fact}` slot, the tail variant fact.tail.
pub fn render_prompt(
    window: &DialogueWindow,
    fact: &PersonaFact,
    template: &PromptTemplate,
    params: &RequestParams,
) -> Result<CompletionRequest, LabelerError> {
    let fact_text = match template.variant {
        Variant::Head => &fact.head,
        Variant::Tail => &fact.tail,
    };
    let context = serialize_context(window);
    let user = template
        .user_text_pattern
        .replace("{context}", &context)
        .replace("{fact}", fact_text);
    for marker in ["{context}", "{fact}"] {
        if user.contains(marker) || template.system_text.contains(marker) {
            // A placeholder surviving substitution means the pattern nested
            // or repeated markers in a way substitution missed.
            return Err(LabelerError::UnboundPlaceholder(marker.to_string()));
        }
    }
    Ok(CompletionRequest {
        model_id: params.model_id.clone(),
        messages: vec![
            Message { role: Role::System, content: template.system_text.clone() },
            Message { role: Role::User, content: user },
        ],
        temperature: params.temperature,
        max_tokens: params.max_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParsedVerdict {
    Yes,
    No,
    Unparseable,
}

/// Scans for the last line matching "answer: yes|no" (case-insensitive);
/// everything before that line is the rationale. Unparseable is a value,
/// not an error.
pub fn parse_verdict(completion_text: &str) -> (ParsedVerdict, String) {
    let mut verdict = ParsedVerdict::Unparseable;
    let mut verdict_line = None;
    for (i, line) in completion_text.lines().enumerate() {
        let lower = line.trim().to_lowercase();
        if let Some(rest) = lower.strip_prefix("answer:") {
            match rest.trim().trim_end_matches(['.', '!']) {
                "yes" => {
                    verdict = ParsedVerdict::Yes;
                    verdict_line = Some(i);
                }
                "no" => {
                    verdict = ParsedVerdict::No;
                    verdict_line = Some(i);
                }
                _ => {}
            }
        }
    }
    let rationale = match verdict_line {
        Some(i) => completion_text.lines().take(i).collect::<Vec<_>>().join("\n"),
        None => completion_text.to_string(),
    };
    (verdict, rationale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub candidate_id: String,
    pub variant: Variant,
    pub verdict: Verdict,
    /// The model's reasoning, retained verbatim.
    pub rationale: String,
    pub template_id: String,
    pub attempts: u32,
}

const RETRY_NUDGE: &str =
    "Respond again with exactly one line: \"Answer: Yes\" or \"Answer: No\".";

/// Append-only annotation checkpoint keyed by (candidate_id, variant,
/// template_id). A crashed run resumes without re-annotating.
pub struct Checkpoint {
    path: PathBuf,
    seen: HashMap<(String, Variant, String), AnnotationResult>,
}

impl Checkpoint {
    pub fn open(path: impl Into<PathBuf>) -> Result<Checkpoint, LabelerError> {
        let path = path.into();
        let mut seen = HashMap::new();
        if path.exists() {
            let file = fs::File::open(&path)
                .map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: AnnotationResult = serde_json::from_str(&line)
                    .map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
                seen.insert(
                    (rec.candidate_id.clone(), rec.variant, rec.template_id.clone()),
                    rec,
                );
            }
        }
        Ok(Checkpoint { path, seen })
    }

    pub fn get(&self, candidate_id: &str, variant: Variant, template_id: &str) -> Option<&AnnotationResult> {
        self.seen
            .get(&(candidate_id.to_string(), variant, template_id.to_string()))
    }

    fn record(&mut self, result: AnnotationResult) -> Result<(), LabelerError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
        let line = serde_json::to_string(&result)
            .map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| LabelerError::Checkpoint(e.to_string()))?;
        self.seen.insert(
            (result.candidate_id.clone(), result.variant, result.template_id.clone()),
            result,
        );
        Ok(())
    }
}

/// Annotates every candidate under one template, retrying unparseable
/// responses up to `retry_max` total attempts with an appended nudge, then
/// recording abstain. Checkpointed results are returned without new client
/// calls.
pub fn annotate(
    candidates: &[CandidateExample],
    client: &LlmClient,
    template: &PromptTemplate,
    params: &RequestParams,
    retry_max: u32,
    checkpoint: &mut Checkpoint,
) -> Result<Vec<AnnotationResult>, LabelerError> {
    let retry_max = retry_max.max(1);
    let mut results = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if let Some(done) = checkpoint.get(&cand.candidate_id, template.variant, &template.template_id)
        {
            results.push(done.clone());
            continue;
        }
        let result = annotate_one(cand, client, template, params, retry_max)?;
        checkpoint.record(result.clone())?;
        results.push(result);
    }
    Ok(results)
}

fn annotate_one(
    cand: &CandidateExample,
    client: &LlmClient,
    template: &PromptTemplate,
    params: &RequestParams,
    retry_max: u32,
) -> Result<AnnotationResult, LabelerError> {
    let mut request = render_prompt(&cand.window, &cand.fact, template, params)?;
    let mut attempts = 0;
    let mut last_rationale = String::new();
    while attempts < retry_max {
        attempts += 1;
        match client.complete(&request) {
            Ok(completion) => {
                let (parsed, rationale) = parse_verdict(&completion.text);
                match parsed {
                    ParsedVerdict::Yes | ParsedVerdict::No => {
                        return Ok(AnnotationResult {
                            candidate_id: cand.candidate_id.clone(),
                            variant: template.variant,
                            verdict: if parsed == ParsedVerdict::Yes {
                                Verdict::Yes
                            } else {
                                Verdict::No
                            },
                            rationale,
                            template_id: template.template_id.clone(),
                            attempts,
                        });
                    }
                    ParsedVerdict::Unparseable => {
                        last_rationale = rationale;
                        // Re-prompt with the previous reply in context and an
                        // explicit format instruction.
                        request.messages.push(Message {
                            role: Role::Assistant,
                            content: completion.text,
                        });
                        request.messages.push(Message {
                            role: Role::User,
                            content: RETRY_NUDGE.to_string(),
                        });
                    }
                }
            }
            Err(LlmError::FixtureMissing(key)) if attempts == 1 => {
                // A missing fixture on the first attempt is a setup problem,
                // not a model abstention.
                return Err(LabelerError::Checkpoint(format!(
                    "no fixture for candidate {} ({key})",
                    cand.candidate_id
                )));
            }
            Err(_) => {
                // Transport/fixture failure consumes an attempt; the client
                // already retried at its own level.
            }
        }
    }
    Ok(AnnotationResult {
        candidate_id: cand.candidate_id.clone(),
        variant: template.variant,
        verdict: Verdict::Abstain,
        rationale: last_rationale,
        template_id: template.template_id.clone(),
        attempts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CombinedLabel {
    pub final_label: bool,
    /// False iff either verdict is abstain; such candidates are excluded
    /// from the combined dataset by default.
    pub decided: bool,
}

/// The AND rule: positive only when head and tail are independently yes.
pub fn combine_labels(head: Verdict, tail: Verdict) -> CombinedLabel {
    let decided = head != Verdict::Abstain && tail != Verdict::Abstain;
    CombinedLabel {
        final_label: head == Verdict::Yes && tail == Verdict::Yes,
        decided,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{normalize_fact, SpeakerId, Utterance};
    use crate::llm::{store_synthetic_fixture, ClientMode};
    use crate::pairing::{CandidateExample, CandidateSource, CANDIDATE_SCHEMA_VERSION};

    fn window() -> DialogueWindow {
        DialogueWindow {
            dialogue_id: "d0".to_string(),
            utterances: vec![Utterance {
                speaker: SpeakerId::SpeakerA,
                index: 0,
                text: "I sing in a band".to_string(),
            }],
            target_index: 0,
            target_speaker: SpeakerId::SpeakerA,
        }
    }

    fn candidate(id: &str) -> CandidateExample {
        CandidateExample {
            schema_version: CANDIDATE_SCHEMA_VERSION,
            candidate_id: id.to_string(),
            window: window(),
            fact: normalize_fact("personx is a singer", "characteristic", "good at singing")
                .unwrap(),
            source: CandidateSource::OwnSpeaker,
            heuristic_label: true,
            shared_fact: false,
            filter_head_score: None,
            filter_tail_score: None,
            scoring_failed: false,
            soft_label: None,
            llm_head_label: None,
            llm_tail_label: None,
            final_label: None,
        }
    }

    #[test]
    fn render_injects_correct_part() {
        let fact = normalize_fact("personx is a singer", "characteristic", "good at singing")
            .unwrap();
        let params = RequestParams::default();
        let head_req =
            render_prompt(&window(), &fact, &PromptTemplate::cot_v1(Variant::Head), &params)
                .unwrap();
        assert!(head_req.messages[1].content.contains("personx is a singer"));
        assert!(!head_req.messages[1].content.contains("good at singing"));

        let tail_req =
            render_prompt(&window(), &fact, &PromptTemplate::cot_v1(Variant::Tail), &params)
                .unwrap();
        assert!(tail_req.messages[1].content.contains("good at singing"));
        assert!(!tail_req.messages[1].content.contains("personx is a singer"));
    }

    #[test]
    fn render_deterministic() {
        let fact = normalize_fact("a chef", "routine_habit", "cooks daily").unwrap();
        let params = RequestParams::default();
        let t = PromptTemplate::cot_v1(Variant::Head);
        let a = render_prompt(&window(), &fact, &t, &params).unwrap();
        let b = render_prompt(&window(), &fact, &t, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.key(), b.key());
    }

    #[test]
    fn verdict_parsing() {
        let (v, rationale) = parse_verdict("The fact matches the dialogue.\nAnswer: Yes");
        assert_eq!(v, ParsedVerdict::Yes);
        assert_eq!(rationale, "The fact matches the dialogue.");

        let (v, _) = parse_verdict("Reasoning here.\nAnswer: NO");
        assert_eq!(v, ParsedVerdict::No);

        let (v, rationale) = parse_verdict("I cannot decide.");
        assert_eq!(v, ParsedVerdict::Unparseable);
        assert_eq!(rationale, "I cannot decide.");

        // last matching line wins
        let (v, _) = parse_verdict("Answer: Yes\nWait, reconsidering.\nAnswer: No");
        assert_eq!(v, ParsedVerdict::No);
    }

    #[test]
    fn combine_rule() {
        assert_eq!(
            combine_labels(Verdict::Yes, Verdict::Yes),
            CombinedLabel { final_label: true, decided: true }
        );
        assert_eq!(
            combine_labels(Verdict::Yes, Verdict::No),
            CombinedLabel { final_label: false, decided: true }
        );
        assert_eq!(
            combine_labels(Verdict::Abstain, Verdict::Yes),
            CombinedLabel { final_label: false, decided: false }
        );
        assert_eq!(
            combine_labels(Verdict::No, Verdict::Abstain),
            CombinedLabel { final_label: false, decided: false }
        );
    }

    #[test]
    fn template_file_roundtrip() {
        let t = PromptTemplate::cot_v1(Variant::Tail);
        let parsed = PromptTemplate::parse(&t.to_file_text()).unwrap();
        assert_eq!(parsed, t);
    }

    #[test]
    fn annotate_happy_path_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let fixture_dir = dir.path().join("fixtures");
        let template = PromptTemplate::cot_v1(Variant::Head);
        let params = RequestParams::default();
        let cands: Vec<_> = (0..3).map(|i| candidate(&format!("c{i}"))).collect();
        for c in &cands {
            let req = render_prompt(&c.window, &c.fact, &template, &params).unwrap();
            store_synthetic_fixture(&fixture_dir, &req, "They mention singing.\nAnswer: Yes")
                .unwrap();
        }
        let client = LlmClient::new(ClientMode::Replay, &fixture_dir);
        let ckpt_path = dir.path().join("ckpt.ndjson");
        let mut ckpt = Checkpoint::open(&ckpt_path).unwrap();
        let results = annotate(&cands, &client, &template, &params, 3, &mut ckpt).unwrap();
        assert_eq!(results.len(), 3);
        assert!(results.iter().all(|r| r.verdict == Verdict::Yes && r.attempts == 1));

        // resume: delete fixtures, rerun over checkpoint -> zero client calls
        std::fs::remove_dir_all(&fixture_dir).unwrap();
        let mut ckpt = Checkpoint::open(&ckpt_path).unwrap();
        let again = annotate(&cands, &client, &template, &params, 3, &mut ckpt).unwrap();
        assert_eq!(again, results);
    }

    #[test]
    fn annotate_retry_then_success() {
        let dir = tempfile::tempdir().unwrap();
        let fixture_dir = dir.path().join("fixtures");
        let template = PromptTemplate::cot_v1(Variant::Head);
        let params = RequestParams::default();
        let cand = candidate("c-retry");

        let mut req = render_prompt(&cand.window, &cand.fact, &template, &params).unwrap();
        store_synthetic_fixture(&fixture_dir, &req, "hmm, unclear").unwrap();
        req.messages.push(Message { role: Role::Assistant, content: "hmm, unclear".to_string() });
        req.messages.push(Message { role: Role::User, content: RETRY_NUDGE.to_string() });
        store_synthetic_fixture(&fixture_dir, &req, "still thinking").unwrap();
        req.messages.push(Message { role: Role::Assistant, content: "still thinking".to_string() });
        req.messages.push(Message { role: Role::User, content: RETRY_NUDGE.to_string() });
        store_synthetic_fixture(&fixture_dir, &req, "Answer: No").unwrap();

        let client = LlmClient::new(ClientMode::Replay, &fixture_dir);
        let mut ckpt = Checkpoint::open(dir.path().join("ckpt.ndjson")).unwrap();
        let results =
            annotate(&[cand], &client, &template, &params, 3, &mut ckpt).unwrap();
        assert_eq!(results[0].verdict, Verdict::No);
        assert_eq!(results[0].attempts, 3);
    }

    #[test]
    fn annotate_abstains_at_retry_max() {
        let dir = tempfile::tempdir().unwrap();
        let fixture_dir = dir.path().join("fixtures");
        let template = PromptTemplate::cot_v1(Variant::Tail);
        let params = RequestParams::default();
        let cand = candidate("c-abstain");
        let req = render_prompt(&cand.window, &cand.fact, &template, &params).unwrap();
        store_synthetic_fixture(&fixture_dir, &req, "no verdict here").unwrap();

        let client = LlmClient::new(ClientMode::Replay, &fixture_dir);
        let mut ckpt = Checkpoint::open(dir.path().join("ckpt.ndjson")).unwrap();
        let results =
            annotate(&[cand], &client, &template, &params, 1, &mut ckpt).unwrap();
        assert_eq!(results[0].verdict, Verdict::Abstain);
        assert_eq!(results[0].attempts, 1);
    }
}
