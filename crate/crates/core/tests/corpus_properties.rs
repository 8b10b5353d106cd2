//! Abbreviation scheme, ingestion, splitting and the synthetic user.

use std::collections::HashSet;

use abbrex_core::corpus::synthetic::{
    corpus_vocabulary, dialog_corpus, make_synthetic_user, movie_lines, nouns_absent, PersonaParams,
};
use abbrex_core::corpus::{
    abbreviate, abbreviation_length, chronological_split, encode_example, framed_text, ingest_str,
    select_characters, to_jsonl, AbbrevExample, Format, Source,
};
use abbrex_core::text::Vocab;
use abbrex_core::CoreError;
use proptest::prelude::*;
use regex::Regex;

#[test]
fn known_abbreviations() {
    for (s, a) in [
        ("sweet i love that robin", "s i l t r"),
        ("what a dunce , okie dokie yall", "w a d , o d y"),
        ("great question dude , robin and mommy", "g q d , r a m"),
    ] {
        assert_eq!(abbreviate(s).unwrap(), a);
    }
    assert_eq!(abbreviation_length("s i l t r"), 5);
    assert_eq!(abbreviation_length("g q d , r a m"), 7);
    assert!(abbreviate("   ").is_err());
}

#[test]
fn scheme_holds_on_10k_sentences() {
    let corpus = dialog_corpus(99, 40, 10_000, &PersonaParams::default());
    assert_eq!(corpus.examples.len(), 10_000);
    for ex in &corpus.examples {
        assert_eq!(abbreviate(&ex.expansion).unwrap(), ex.abbreviation);
        // Independent statement of the rule: one character per token.
        let want: Vec<String> = ex
            .expansion
            .split_whitespace()
            .map(|w| w.chars().next().unwrap().to_string())
            .collect();
        assert_eq!(ex.abbreviation, want.join(" "));
        assert!(ex.abbreviation.split(' ').all(|t| t.chars().count() == 1));
    }
}

#[test]
fn mean_length_agrees_with_regex_count() {
    let base = dialog_corpus(1, 30, 3000, &PersonaParams::default());
    let user = make_synthetic_user(5, 600, 8, &base.vocabulary(), &PersonaParams::default()).unwrap();
    let split = chronological_split(&user.examples, [0.6, 0.2, 0.2], true, Some(10)).unwrap();
    let re = Regex::new(r"\S+").unwrap();
    let by_op: usize = split.train.iter().map(|e| e.abbreviation_length()).sum();
    let by_re: usize = split.train.iter().map(|e| re.find_iter(&e.abbreviation).count()).sum();
    assert_eq!(by_op, by_re);
}

#[test]
fn synthetic_user_nouns_are_novel() {
    let base = dialog_corpus(2, 30, 4000, &PersonaParams::default());
    let vocab = base.vocabulary();
    let user = make_synthetic_user(9, 400, 10, &vocab, &PersonaParams::default()).unwrap();
    assert_eq!(user.novel_nouns.len(), 10);
    // Full scan of every word of every base sentence and context.
    let scan = base.examples.iter().all(|e| {
        let words = e.expansion.split(' ').chain(e.context.iter().flat_map(|c| c.split(' ')));
        words.into_iter().all(|w| !user.novel_nouns.contains(&w.to_string()))
    });
    assert!(scan);
    assert_eq!(nouns_absent(&user.novel_nouns, &base.examples), scan);
    let used: HashSet<String> = corpus_vocabulary(&user.examples);
    assert!(user.novel_nouns.iter().any(|n| used.contains(n)));
    // A noun that does occur is detected.
    let present = vec![base.examples[0].expansion.split(' ').next().unwrap().to_string()];
    assert!(!nouns_absent(&present, &base.examples));

    let again = make_synthetic_user(9, 400, 10, &vocab, &PersonaParams::default()).unwrap();
    assert_eq!(again.examples, user.examples);
    let plain = make_synthetic_user(9, 400, 0, &vocab, &PersonaParams::default()).unwrap();
    assert!(corpus_vocabulary(&plain.examples).is_subset(&vocab));
    assert!(make_synthetic_user(9, 49, 0, &vocab, &PersonaParams::default()).is_err());
}

#[test]
fn split_pipeline_shape() {
    let base = dialog_corpus(3, 30, 3000, &PersonaParams::default());
    let user = make_synthetic_user(4, 1199, 8, &base.vocabulary(), &PersonaParams::default()).unwrap();
    let ratios = [630.0 / 1199.0, 285.0 / 1199.0, 284.0 / 1199.0];
    let s = chronological_split(&user.examples, ratios, true, Some(10)).unwrap();
    assert_eq!(s.policy.pre_filter, [630, 285, 284]);
    assert_eq!(s.train.len(), 630);
    assert!(s.val.len() < 285 && s.test.len() < 284);
    let train: HashSet<&str> = s.train.iter().map(|e| e.expansion.as_str()).collect();
    let val: HashSet<&str> = s.val.iter().map(|e| e.expansion.as_str()).collect();
    assert!(s.val.iter().chain(&s.test).all(|e| !train.contains(e.expansion.as_str())));
    assert!(s.test.iter().all(|e| !val.contains(e.expansion.as_str())));
    assert!(s.val.iter().chain(&s.test).all(|e| e.abbreviation_length() <= 10));
    let unfiltered = chronological_split(&user.examples, ratios, true, None).unwrap();
    assert!(unfiltered.val.len() >= s.val.len() && unfiltered.test.len() >= s.test.len());
    let manifest = s.manifest();
    assert_eq!(manifest["counts"]["train"], 630);
}

#[test]
fn identical_timestamps_rejected() {
    let exs: Vec<AbbrevExample> = ["a b", "c d", "e f"]
        .iter()
        .map(|t| AbbrevExample::from_text(t, None, 5, "u", Source::SyntheticUser).unwrap())
        .collect();
    assert!(chronological_split(&exs, [0.4, 0.3, 0.3], false, None).is_err());
}

#[test]
fn ingestion_round_trips() {
    let corpus = dialog_corpus(6, 5, 300, &PersonaParams::default());
    let text = to_jsonl(&corpus.examples);
    let back = ingest_str(&text, Format::Jsonl, Source::DialogCorpus).unwrap();
    assert_eq!(back, corpus.examples);
    assert_eq!(ingest_str(&to_jsonl(&back), Format::Jsonl, Source::DialogCorpus).unwrap(), back);

    let three = "{\"text\":\"Hi there\",\"speaker\":\"a\",\"t\":0}\n{\"text\":\"hello\",\"speaker\":\"b\",\"t\":1,\"context\":\"hi there\"}\n{\"text\":\"bye\",\"speaker\":\"a\",\"t\":2}\n";
    let exs = ingest_str(three, Format::Jsonl, Source::DialogCorpus).unwrap();
    assert_eq!(exs.iter().map(|e| e.expansion.as_str()).collect::<Vec<_>>(), ["hi there", "hello", "bye"]);
    match ingest_str("{\"text\":\"ok\",\"speaker\":\"a\",\"t\":0}\nnot json\n", Format::Jsonl, Source::DialogCorpus) {
        Err(CoreError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(ingest_str("\n", Format::Jsonl, Source::DialogCorpus), Err(CoreError::NoRecords)));

    let movie = "L1 +++$+++ u0 +++$+++ m0 +++$+++ BIANCA +++$+++ They do not!\nL2 +++$+++ u1 +++$+++ m0 +++$+++ CAMERON +++$+++ They do to!\n";
    let m = ingest_str(movie, Format::CornellSeparator, Source::MovieCharacter).unwrap();
    assert_eq!(m[0].speaker_id, "m0/u0");
    assert_eq!(m[1].expansion, "they do to !");
    assert_eq!((m[0].timestamp, m[1].timestamp), (0, 1));
}

#[test]
fn selection_statistics() {
    let text = movie_lines(12, 9, (20, 140), &PersonaParams::default());
    let exs = ingest_str(&text, Format::CornellSeparator, Source::MovieCharacter).unwrap();
    let all = select_characters(&exs, 0);
    let counts: Vec<usize> = all.counts().iter().map(|(_, c)| *c).collect();
    assert_eq!(counts.len(), 9);
    assert_eq!(counts.iter().sum::<usize>(), exs.len());
    // Spreadsheet-style: AVERAGE and MEDIAN over the count column.
    let mut sorted = counts.clone();
    sorted.sort();
    let avg = sorted.iter().map(|&c| c as f64).sum::<f64>() / 9.0;
    assert_eq!(all.mean_count, avg);
    assert_eq!(all.median_count, sorted[4] as f64);

    let min = 100;
    let sel = select_characters(&exs, min);
    assert!(sel.counts().iter().all(|(_, c)| *c >= min));
    assert_eq!(sel.characters.len(), counts.iter().filter(|&&c| c >= min).count());
}

#[test]
fn selection_threshold_fixture() {
    let mut lines = String::new();
    for i in 0..154 {
        let who = if i < 104 { "u1" } else { "u2" };
        lines.push_str(&format!("L{i} +++$+++ {who} +++$+++ m1 +++$+++ NAME +++$+++ line number {i}\n"));
    }
    let exs = ingest_str(&lines, Format::CornellSeparator, Source::MovieCharacter).unwrap();
    let sel = select_characters(&exs, 100);
    assert_eq!(sel.counts(), vec![("m1/u1".to_string(), 104)]);
}

#[test]
fn encoding_frames() {
    let ex = AbbrevExample::from_text("I love that Robin", Some("how are you"), 0, "u", Source::DialogCorpus).unwrap();
    let v = Vocab::default();
    for ctx in [false, true] {
        let e = encode_example(&ex, ctx, 512).unwrap();
        assert_eq!(v.decode(&e.token_ids).unwrap(), framed_text(&ex, ctx));
        assert_eq!(e.loss_mask.iter().filter(|&&m| m).count(), ex.expansion.chars().count() + 1);
    }
    let bare = AbbrevExample { context: None, ..ex.clone() };
    assert!(!framed_text(&bare, true).contains("<ctx>"));
    assert!(matches!(encode_example(&ex, true, 10), Err(CoreError::ContextOverflow { limit: 10, .. })));
}

proptest! {
    #[test]
    fn split_invariants(n in 12usize..80, a in 0.2f64..0.7, dedup: bool, cap in proptest::option::of(1usize..6)) {
        let words = ["tea", "go", "now", "robin", "mom", "call", ","];
        let exs: Vec<AbbrevExample> = (0..n)
            .map(|i| {
                let len = 1 + (i * 7) % 6;
                let text: Vec<&str> = (0..len).map(|j| words[(i + j * 3) % words.len()]).collect();
                AbbrevExample::from_text(&text.join(" "), None, i as u64, "u", Source::SyntheticUser).unwrap()
            })
            .collect();
        let b = (1.0 - a) / 2.0;
        let Ok(s) = chronological_split(&exs, [a, b, 1.0 - a - b], dedup, cap) else { return Ok(()); };
        let t = |v: &[AbbrevExample]| v.iter().map(|e| e.timestamp).collect::<Vec<_>>();
        for part in [&s.train, &s.val, &s.test] {
            let ts = t(part);
            let mut sorted = ts.clone();
            sorted.sort();
            prop_assert_eq!(ts, sorted);
        }
        prop_assert!(s.train.last().unwrap().timestamp <= s.val[0].timestamp);
        prop_assert!(s.val.last().unwrap().timestamp <= s.test[0].timestamp);
        if let Some(c) = cap {
            prop_assert!(s.val.iter().chain(&s.test).all(|e| e.abbreviation_length() <= c));
        }
        if let Ok(wide) = chronological_split(&exs, [a, b, 1.0 - a - b], dedup, None) {
            prop_assert!(wide.val.len() >= s.val.len() && wide.test.len() >= s.test.len());
            prop_assert_eq!(wide.train.len(), s.train.len());
        }
    }

    #[test]
    fn abbreviation_consistent(words in proptest::collection::vec("[a-z0-9]{1,8}|[,.!?]", 1..12)) {
        let s = words.join(" ");
        let ex = AbbrevExample::from_text(&s, None, 0, "u", Source::SyntheticUser).unwrap();
        prop_assert_eq!(abbreviate(&ex.expansion).unwrap(), ex.abbreviation.clone());
        prop_assert_eq!(abbreviation_length(&ex.abbreviation), ex.expansion.split(' ').count());
    }
}
