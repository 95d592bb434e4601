//! Property tests for the invariants the pipeline leans on: windowing
//! geometry, canonical-format round-trips, calibration bounds, verdict
//! parsing, and id stability.

use proptest::prelude::*;

use syncpkl::corpus::{
    extract_windows, normalize_fact, normalize_text, parse_corpus, serialize_canonical,
    serialize_context, CorpusFormat, Dialogue, PersonaProfile, Relation, SpeakerId, Utterance,
};
use syncpkl::filter::calibrate_threshold;
use syncpkl::labeler::{parse_verdict, ParsedVerdict};
use syncpkl::pairing::candidate_id;

fn relation_strategy() -> impl Strategy<Value = Relation> {
    prop::sample::select(Relation::ALL.to_vec())
}

fn text_strategy() -> impl Strategy<Value = String> {
    // Words only: mirrors post-normalization utterance content.
    proptest::collection::vec("[a-z]{1,8}", 1..6).prop_map(|w| w.join(" "))
}

fn dialogue_strategy() -> impl Strategy<Value = Dialogue> {
    (
        "[a-z0-9_]{1,12}",
        proptest::collection::vec(text_strategy(), 1..15),
        proptest::collection::vec((text_strategy(), relation_strategy(), text_strategy()), 0..4),
        proptest::collection::vec((text_strategy(), relation_strategy(), text_strategy()), 0..4),
    )
        .prop_map(|(id, texts, facts_a, facts_b)| {
            let utterances = texts
                .into_iter()
                .enumerate()
                .map(|(index, text)| Utterance {
                    speaker: if index % 2 == 0 { SpeakerId::SpeakerA } else { SpeakerId::SpeakerB },
                    index,
                    text,
                })
                .collect();
            let profile = |speaker, facts: Vec<(String, Relation, String)>| PersonaProfile {
                speaker,
                facts: facts
                    .into_iter()
                    .map(|(h, r, t)| normalize_fact(&h, r.as_str(), &t).unwrap())
                    .collect(),
                raw_lines: vec![],
            };
            Dialogue {
                dialogue_id: id,
                utterances,
                profiles: [
                    profile(SpeakerId::SpeakerA, facts_a),
                    profile(SpeakerId::SpeakerB, facts_b),
                ],
            }
        })
}

proptest! {
    #[test]
    fn windows_are_contiguous_and_cover_target(
        dialogue in dialogue_strategy(),
        half in 0usize..4,
    ) {
        let size = 2 * half + 1;
        let n = dialogue.utterances.len();
        let windows = extract_windows(&dialogue, size).unwrap();
        prop_assert_eq!(windows.len(), n);
        for (t, w) in windows.iter().enumerate() {
            let indices: Vec<usize> = w.utterances.iter().map(|u| u.index).collect();
            prop_assert!(indices.contains(&t));
            prop_assert!(indices.windows(2).all(|p| p[1] == p[0] + 1));
            let feasible = t.min(half) + (n - 1 - t).min(half) + 1;
            prop_assert_eq!(indices.len(), feasible.min(size));
            prop_assert_eq!(w.target_speaker, dialogue.utterances[t].speaker);
        }
    }

    #[test]
    fn context_marks_exactly_one_target(dialogue in dialogue_strategy()) {
        for w in extract_windows(&dialogue, 5).unwrap() {
            let context = serialize_context(&w);
            prop_assert_eq!(context.matches("<target>").count(), 1);
            prop_assert_eq!(context.matches("</target>").count(), 1);
            prop_assert_eq!(context.lines().count(), w.utterances.len());
        }
    }

    #[test]
    fn canonical_round_trip(dialogues in proptest::collection::vec(dialogue_strategy(), 1..5)) {
        let mut body = String::new();
        for d in &dialogues {
            body.push_str(&serialize_canonical(d));
            body.push('\n');
        }
        let outcome = parse_corpus(body.as_bytes(), CorpusFormat::Canonical).unwrap();
        prop_assert!(outcome.rejects.is_empty(), "{:?}", outcome.rejects);
        prop_assert_eq!(outcome.dialogues, dialogues);
    }

    #[test]
    fn calibration_stays_within_bound(
        seeds in proptest::collection::hash_set(0u32..1_000_000, 1..200),
        target in 0.05f64..0.95,
    ) {
        // Distinct u32 seeds map to distinct scores.
        let scores: Vec<f64> = seeds.iter().map(|&s| s as f64 / 1_000_000.0).collect();
        let n = scores.len();
        let result = calibrate_threshold(&scores, target).unwrap();
        prop_assert!(result.achieved_positive_rate > 0.0);
        prop_assert!(
            (result.achieved_positive_rate - target).abs() <= 1.0 / n as f64 + 1e-12,
            "n={} target={} achieved={}", n, target, result.achieved_positive_rate
        );
        prop_assert!(scores.contains(&result.threshold));
    }

    #[test]
    fn verdict_parsing_takes_last_answer_line(
        prefix in proptest::collection::vec("[A-Za-z ,.]{0,40}", 0..5),
        yes in any::<bool>(),
        punct in prop::sample::select(vec!["", ".", "!"]),
    ) {
        let mut text = prefix.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        // An early contradictory verdict must lose to the final line.
        text.push_str(if yes { "Answer: No\n" } else { "Answer: Yes\n" });
        text.push_str(&format!("Answer: {}{punct}", if yes { "Yes" } else { "No" }));
        let (verdict, _) = parse_verdict(&text);
        let expected = if yes { ParsedVerdict::Yes } else { ParsedVerdict::No };
        prop_assert_eq!(verdict, expected);
    }

    #[test]
    fn normalize_text_is_idempotent(raw in "\\PC{0,60}") {
        let once = normalize_text(&raw);
        prop_assert_eq!(normalize_text(&once), once.clone());
        prop_assert!(!once.contains("  "));
    }

    #[test]
    fn candidate_ids_are_content_stable(
        dialogue_id in "[a-z0-9_]{1,12}",
        index in 0usize..30,
        head in text_strategy(),
        relation in relation_strategy(),
        tail in text_strategy(),
    ) {
        let fact = normalize_fact(&head, relation.as_str(), &tail).unwrap();
        let id_a = candidate_id(&dialogue_id, index, &fact);
        let id_b = candidate_id(&dialogue_id, index, &fact);
        prop_assert_eq!(&id_a, &id_b);
        // Shifting the target index must change the id.
        prop_assert_ne!(id_a, candidate_id(&dialogue_id, index + 1, &fact));
    }
}
