//! Sentence BLEU against an independent implementation.

mod support;

use abbrex_core::eval::{bleu_at_k, sentence_bleu, EvalRow};
use support::bleu_ref;

#[test]
fn agrees_with_reference_on_50_pairs() {
    let mut nonzero = 0;
    for (candidate, reference) in bleu_ref::pairs(50) {
        let (a, b) = (sentence_bleu(&candidate, &reference), bleu_ref::reference_bleu(&candidate, &reference));
        assert!((a - b).abs() < 1e-6, "{candidate:?} vs {reference:?}: {a} != {b}");
        nonzero += usize::from(a > 0.0);
    }
    assert!(nonzero > 20);
}

#[test]
fn identical_and_disjoint() {
    assert_eq!(sentence_bleu("sweet i love that robin", "sweet i love that robin"), 1.0);
    assert_eq!(sentence_bleu("a", "a"), 1.0);
    assert_eq!(sentence_bleu("tea is hot", "please call mom"), 0.0);
}

#[test]
fn bleu_at_k_takes_best_candidate() {
    let row = EvalRow::score(
        "x".into(),
        4,
        "i love that robin",
        &["call mom".into(), "i love that".into(), "i love that robin".into()],
    );
    assert_eq!(row.bleu, 1.0);
    let row2 = EvalRow::score("y".into(), 4, "i love that robin", &["call mom".into()]);
    assert_eq!(bleu_at_k(&[row, row2]).unwrap(), 50.0);
}
