//! Sanity checks on the bundled fixtures: the mini-corpus parses cleanly and
//! the example conversation behaves as documented; the shipped template
//! files equal the built-in prompts.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use syncpkl::corpus::{extract_windows, parse_corpus, serialize_context, CorpusFormat, SpeakerId};
use syncpkl::labeler::{PromptTemplate, Variant};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("workspace root")
        .to_path_buf()
}

#[test]
fn mini_corpus_parses_without_rejects() {
    let file = File::open(workspace_root().join("fixtures/mini_corpus.json")).unwrap();
    let outcome = parse_corpus(BufReader::new(file), CorpusFormat::PersonachatPeacok).unwrap();
    assert!(outcome.rejects.is_empty(), "{:?}", outcome.rejects);
    assert_eq!(outcome.dialogues.len(), 5);
}

#[test]
fn example_conversation_window_shape() {
    let file = File::open(workspace_root().join("fixtures/mini_corpus.json")).unwrap();
    let outcome = parse_corpus(BufReader::new(file), CorpusFormat::PersonachatPeacok).unwrap();
    let dialogue = outcome
        .dialogues
        .iter()
        .find(|d| d.dialogue_id == "dlg_001_free_diving")
        .expect("example dialogue present");

    assert_eq!(dialogue.utterances.len(), 14);
    assert_eq!(dialogue.profiles[0].raw_lines.len(), 4);
    assert_eq!(dialogue.profiles[1].raw_lines.len(), 4);
    assert_eq!(dialogue.utterances[10].speaker, SpeakerId::SpeakerA);
    assert!(dialogue.utterances[10].text.contains("free diving"));

    // An interior target gets the full five-utterance window, with the
    // marked target on the middle line.
    let windows = extract_windows(dialogue, 5).unwrap();
    let window = &windows[10];
    assert_eq!(window.utterances.len(), 5);
    let context = serialize_context(window);
    let lines: Vec<&str> = context.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("<target>A: I really enjoy free diving"));

    // Edge targets clip instead of padding.
    assert_eq!(windows[0].utterances.len(), 3);
    assert_eq!(windows[13].utterances.len(), 3);
}

#[test]
fn bundled_templates_match_builtins() {
    for (file, variant) in [
        ("cot_v1_head.txt", Variant::Head),
        ("cot_v1_tail.txt", Variant::Tail),
    ] {
        let path = workspace_root().join("fixtures/templates").join(file);
        let parsed = PromptTemplate::from_file(&path).unwrap();
        assert_eq!(parsed, PromptTemplate::cot_v1(variant), "{file} drifted from the builtin");
    }
}
