//! Corpus ingestion: typed dialogues, persona fact triples, and
//! target-centered dialogue windows.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The five PeaCoK relation types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Characteristic,
    RoutineHabit,
    GoalPlan,
    Experience,
    Relationship,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Characteristic,
        Relation::RoutineHabit,
        Relation::GoalPlan,
        Relation::Experience,
        Relation::Relationship,
    ];

    /// Canonical snake_case name.
    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::Characteristic => "characteristic",
            Relation::RoutineHabit => "routine_habit",
            Relation::GoalPlan => "goal_plan",
            Relation::Experience => "experience",
            Relation::Relationship => "relationship",
        }
    }

    /// Human-readable verbalization used in serialized fact text.
    pub fn verbalize(&self) -> &'static str {
        match self {
            Relation::Characteristic => "characteristic",
            Relation::RoutineHabit => "routine or habit",
            Relation::GoalPlan => "goal or plan",
            Relation::Experience => "experience",
            Relation::Relationship => "relationship",
        }
    }

    /// Parses a relation name, accepting space/underscore/hyphen separator
    /// variants and mixed case (source releases differ in casing).
    pub fn parse(raw: &str) -> Result<Relation, CorpusError> {
        let norm: String = raw
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        // collapse repeated separators
        let mut key = String::with_capacity(norm.len());
        let mut prev_sep = false;
        for c in norm.chars() {
            if c == '_' {
                if !prev_sep {
                    key.push('_');
                }
                prev_sep = true;
            } else {
                key.push(c);
                prev_sep = false;
            }
        }
        match key.trim_matches('_') {
            "characteristic" => Ok(Relation::Characteristic),
            "routine_habit" | "routine_or_habit" => Ok(Relation::RoutineHabit),
            "goal_plan" | "goal_or_plan" => Ok(Relation::GoalPlan),
            "experience" => Ok(Relation::Experience),
            "relationship" => Ok(Relation::Relationship),
            _ => Err(CorpusError::UnknownRelation(raw.trim().to_string())),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerId {
    SpeakerA,
    SpeakerB,
}

impl SpeakerId {
    pub fn other(&self) -> SpeakerId {
        match self {
            SpeakerId::SpeakerA => SpeakerId::SpeakerB,
            SpeakerId::SpeakerB => SpeakerId::SpeakerA,
        }
    }

    pub fn prefix(&self) -> &'static str {
        match self {
            SpeakerId::SpeakerA => "A",
            SpeakerId::SpeakerB => "B",
        }
    }
}

/// A (head, relation, tail) persona fact triple.
///
/// Equality and hashing are defined on the normalized (lowercased,
/// whitespace-collapsed) head and tail, so facts that differ only in case
/// or spacing compare equal. This is what shared-fact detection relies on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonaFact {
    pub head: String,
    pub relation: Relation,
    pub tail: String,
}

impl PersonaFact {
    /// Normalized identity key: (head, relation name, tail) lowercased with
    /// collapsed whitespace.
    pub fn normalized_key(&self) -> (String, &'static str, String) {
        (
            normalize_text(&self.head),
            self.relation.as_str(),
            normalize_text(&self.tail),
        )
    }
}

impl PartialEq for PersonaFact {
    fn eq(&self, other: &Self) -> bool {
        self.normalized_key() == other.normalized_key()
    }
}

impl Eq for PersonaFact {}

impl std::hash::Hash for PersonaFact {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.normalized_key().hash(state);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: SpeakerId,
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub speaker: SpeakerId,
    pub facts: Vec<PersonaFact>,
    /// Original persona sentences, retained for provenance only.
    pub raw_lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
    /// Exactly two profiles, speaker A then speaker B.
    pub profiles: [PersonaProfile; 2],
}

impl Dialogue {
    pub fn profile(&self, speaker: SpeakerId) -> &PersonaProfile {
        match speaker {
            SpeakerId::SpeakerA => &self.profiles[0],
            SpeakerId::SpeakerB => &self.profiles[1],
        }
    }
}

/// Up to five consecutive utterances centered on the target speaker's
/// utterance. Windows at dialogue edges shrink rather than pad.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueWindow {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
    /// Index of the target utterance within the parent dialogue.
    pub target_index: usize,
    pub target_speaker: SpeakerId,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown relation \"{0}\"")]
    UnknownRelation(String),
    #[error("empty {0} after trimming")]
    EmptyField(&'static str),
    #[error("window_size must be odd and >= 1, got {0}")]
    InvalidWindowSize(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {format} input: {message}")]
    Malformed { format: &'static str, message: String },
}

/// Lowercase and collapse all whitespace runs to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Builds a normalized [`PersonaFact`] from raw strings.
///
/// Idempotent: normalizing an already-normalized fact changes nothing.
/// The "personx" subject convention from source data is preserved verbatim
/// (lowercasing does not alter it).
pub fn normalize_fact(
    raw_head: &str,
    raw_relation: &str,
    raw_tail: &str,
) -> Result<PersonaFact, CorpusError> {
    let head = normalize_text(raw_head);
    let tail = normalize_text(raw_tail);
    if head.is_empty() {
        return Err(CorpusError::EmptyField("head"));
    }
    if tail.is_empty() {
        return Err(CorpusError::EmptyField("tail"));
    }
    let relation = Relation::parse(raw_relation)?;
    Ok(PersonaFact { head, relation, tail })
}

/// One window per utterance index, spanning `[t - k, t + k]` for
/// `window_size = 2k + 1`, clipped to dialogue bounds.
pub fn extract_windows(
    dialogue: &Dialogue,
    window_size: usize,
) -> Result<Vec<DialogueWindow>, CorpusError> {
    if window_size == 0 || window_size % 2 == 0 {
        return Err(CorpusError::InvalidWindowSize(window_size));
    }
    let half = window_size / 2;
    let n = dialogue.utterances.len();
    let mut windows = Vec::with_capacity(n);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(n - 1);
        windows.push(DialogueWindow {
            dialogue_id: dialogue.dialogue_id.clone(),
            utterances: dialogue.utterances[lo..=hi].to_vec(),
            target_index: t,
            target_speaker: dialogue.utterances[t].speaker,
        });
    }
    Ok(windows)
}

/// Deterministic context text: one line per utterance, prefixed "A: " or
/// "B: ", the target line wrapped in `<target>...</target>` markers.
/// Versioned as context_format=v1 in provenance metadata.
pub const CONTEXT_FORMAT_VERSION: &str = "v1";

pub fn serialize_context(window: &DialogueWindow) -> String {
    let mut lines = Vec::with_capacity(window.utterances.len());
    for u in &window.utterances {
        let line = format!("{}: {}", u.speaker.prefix(), u.text);
        if u.index == window.target_index {
            lines.push(format!("<target>{line}</target>"));
        } else {
            lines.push(line);
        }
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// Input formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Format A: the PersonaChat-augmented-with-PeaCoK release layout, a
    /// single JSON document keyed by dialogue id. See fixtures for an example.
    PersonachatPeacok,
    /// Format B: internal canonical newline-delimited records, one dialogue
    /// per line. This is the round-trip target.
    Canonical,
}

/// A record that failed record-level validation. Collected, not dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub source_locator: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub dialogues: Vec<Dialogue>,
    pub rejects: Vec<Reject>,
}

// Canonical (format B) wire records.

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalUtterance {
    speaker: SpeakerId,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalFact {
    head: String,
    relation: String,
    tail: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalPersona {
    speaker: SpeakerId,
    facts: Vec<CanonicalFact>,
    #[serde(default)]
    lines: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalDialogue {
    dialogue_id: String,
    utterances: Vec<CanonicalUtterance>,
    personas: Vec<CanonicalPersona>,
}

// Format A wire shape: { "<dialogue_id>": { "persona1": {...}, "persona2":
// {...}, "utterances": ["...", ...] }, ... }. Utterances alternate starting
// with persona1 (speaker A).

#[derive(Debug, Deserialize)]
struct ReleasePersona {
    #[serde(default)]
    lines: Vec<String>,
    #[serde(default)]
    facts: Vec<[String; 3]>,
}

#[derive(Debug, Deserialize)]
struct ReleaseDialogue {
    persona1: ReleasePersona,
    persona2: ReleasePersona,
    utterances: Vec<String>,
}

/// Parses a corpus from a reader in the declared format. Malformed records
/// go to the rejects report; an unreadable source is a fatal error.
pub fn parse_corpus<R: BufRead>(
    source: R,
    format: CorpusFormat,
) -> Result<ParseOutcome, CorpusError> {
    match format {
        CorpusFormat::PersonachatPeacok => parse_release(source),
        CorpusFormat::Canonical => parse_canonical(source),
    }
}

fn parse_release<R: BufRead>(mut source: R) -> Result<ParseOutcome, CorpusError> {
    let mut buf = String::new();
    source.read_to_string(&mut buf)?;
    if buf.trim().is_empty() {
        return Ok(ParseOutcome::default());
    }
    // BTreeMap keeps dialogue order stable across runs.
    let raw: BTreeMap<String, ReleaseDialogue> =
        serde_json::from_str(&buf).map_err(|e| CorpusError::Malformed {
            format: "personachat_peacok",
            message: e.to_string(),
        })?;
    let mut out = ParseOutcome::default();
    for (dialogue_id, rec) in raw {
        match release_to_dialogue(&dialogue_id, rec) {
            Ok(d) => out.dialogues.push(d),
            Err(reason) => out.rejects.push(Reject {
                source_locator: dialogue_id,
                reason,
            }),
        }
    }
    Ok(out)
}

fn release_to_dialogue(dialogue_id: &str, rec: ReleaseDialogue) -> Result<Dialogue, String> {
    let mut profiles = Vec::with_capacity(2);
    for (speaker, persona) in [
        (SpeakerId::SpeakerA, rec.persona1),
        (SpeakerId::SpeakerB, rec.persona2),
    ] {
        let mut facts = Vec::with_capacity(persona.facts.len());
        for [h, r, t] in persona.facts {
            let fact = normalize_fact(&h, &r, &t).map_err(|e| e.to_string())?;
            facts.push(fact);
        }
        profiles.push(PersonaProfile {
            speaker,
            facts,
            raw_lines: persona.lines,
        });
    }
    let utterances = rec
        .utterances
        .into_iter()
        .enumerate()
        .map(|(index, text)| {
            if text.trim().is_empty() {
                return Err(format!("empty utterance at index {index}"));
            }
            Ok(Utterance {
                speaker: if index % 2 == 0 {
                    SpeakerId::SpeakerA
                } else {
                    SpeakerId::SpeakerB
                },
                index,
                text,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let [a, b]: [PersonaProfile; 2] = profiles.try_into().expect("two profiles");
    Ok(Dialogue {
        dialogue_id: dialogue_id.to_string(),
        utterances,
        profiles: [a, b],
    })
}

fn parse_canonical<R: BufRead>(source: R) -> Result<ParseOutcome, CorpusError> {
    let mut out = ParseOutcome::default();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let locator = format!("line {}", lineno + 1);
        match serde_json::from_str::<CanonicalDialogue>(&line) {
            Ok(rec) => match canonical_to_dialogue(rec) {
                Ok(d) => out.dialogues.push(d),
                Err(reason) => out.rejects.push(Reject {
                    source_locator: locator,
                    reason,
                }),
            },
            Err(e) => out.rejects.push(Reject {
                source_locator: locator,
                reason: format!("schema violation: {e}"),
            }),
        }
    }
    Ok(out)
}

fn canonical_to_dialogue(rec: CanonicalDialogue) -> Result<Dialogue, String> {
    if rec.personas.len() != 2 {
        return Err(format!("expected 2 personas, got {}", rec.personas.len()));
    }
    let mut profile_a = None;
    let mut profile_b = None;
    for p in rec.personas {
        let mut facts = Vec::with_capacity(p.facts.len());
        for f in p.facts {
            facts.push(normalize_fact(&f.head, &f.relation, &f.tail).map_err(|e| e.to_string())?);
        }
        let profile = PersonaProfile {
            speaker: p.speaker,
            facts,
            raw_lines: p.lines,
        };
        match p.speaker {
            SpeakerId::SpeakerA => profile_a = Some(profile),
            SpeakerId::SpeakerB => profile_b = Some(profile),
        }
    }
    let (Some(a), Some(b)) = (profile_a, profile_b) else {
        return Err("personas must cover speaker_a and speaker_b".to_string());
    };
    let utterances = rec
        .utterances
        .into_iter()
        .enumerate()
        .map(|(index, u)| {
            if u.text.trim().is_empty() {
                return Err(format!("empty utterance at index {index}"));
            }
            Ok(Utterance {
                speaker: u.speaker,
                index,
                text: u.text,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dialogue {
        dialogue_id: rec.dialogue_id,
        utterances,
        profiles: [a, b],
    })
}

/// Serializes one dialogue as a canonical (format B) record.
pub fn serialize_canonical(dialogue: &Dialogue) -> String {
    let rec = CanonicalDialogue {
        dialogue_id: dialogue.dialogue_id.clone(),
        utterances: dialogue
            .utterances
            .iter()
            .map(|u| CanonicalUtterance {
                speaker: u.speaker,
                text: u.text.clone(),
            })
            .collect(),
        personas: dialogue
            .profiles
            .iter()
            .map(|p| CanonicalPersona {
                speaker: p.speaker,
                facts: p
                    .facts
                    .iter()
                    .map(|f| CanonicalFact {
                        head: f.head.clone(),
                        relation: f.relation.as_str().to_string(),
                        tail: f.tail.clone(),
                    })
                    .collect(),
                lines: p.raw_lines.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("canonical record serializes")
}
