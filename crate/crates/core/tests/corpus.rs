//! Corpus construction from the shipped assets.

use std::collections::HashSet;

use biaslab::assets::{self, Corpora};
use biaslab::corpus::{
    self, hint_gender_counts, read_bias_jsonl, read_hint_jsonl, split_corpus_with, write_jsonl,
    SampleRecord, Scale, SplitStrategy,
};
use proptest::prelude::*;

#[test]
fn shipped_totals() {
    let c = Corpora::shipped();
    let kept = c.retained();
    assert_eq!(kept.len(), 262);
    assert_eq!(c.professions.len() - kept.len(), 58);
    assert_eq!(c.bias.len(), 2358);
    assert_eq!(c.hint.len(), 786);
    assert_eq!(hint_gender_counts(&c.hint), (524, 262));
}

#[test]
fn shipped_split_matches_reference_counts() {
    let counts = Corpora::shipped().split.counts();
    assert_eq!(counts.total, [943, 471, 944]);
    assert_eq!(counts.by_scale[&Scale::Word], [326, 152, 308]);
    assert_eq!(counts.by_scale[&Scale::Phrase], [299, 157, 330]);
    assert_eq!(counts.by_scale[&Scale::Sentence], [318, 162, 306]);
}

#[test]
fn each_scale_has_one_sample_per_profession_and_template() {
    let c = Corpora::shipped();
    for scale in Scale::ALL {
        assert_eq!(c.bias.iter().filter(|s| s.scale == scale).count(), 786);
    }
    let texts: HashSet<&str> = c.bias.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(texts.len(), c.bias.len());
    assert!(c.bias.iter().all(|s| s.text.starts_with("The ") && s.text.ends_with("because")));
}

#[test]
fn split_is_a_partition_and_reproducible() {
    let c = Corpora::shipped();
    let s = &c.split;
    let mut ids: Vec<u64> = s.train.iter().chain(&s.dev).chain(&s.test).map(|x| x.id).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..2358).collect::<Vec<_>>());
    let again = corpus::split_corpus(&c.bias, s.seed).unwrap();
    assert_eq!(&again, s);
}

#[test]
fn stratified_split_cuts_every_scale_two_one_two() {
    let c = Corpora::shipped();
    let s = split_corpus_with(&c.bias, 1, SplitStrategy::Stratified).unwrap();
    for scale in Scale::ALL {
        assert_eq!(s.counts().by_scale[&scale], [314, 157, 315]);
    }
}

#[test]
fn excluded_professions_are_gendered() {
    let c = Corpora::shipped();
    for name in ["chairman", "waitress", "nun", "policewoman"] {
        let p = c.professions.iter().find(|p| p.surface == name).unwrap();
        assert!(p.excluded, "{name}");
    }
    for name in ["nurse", "lifeguard", "mechanic"] {
        let p = c.professions.iter().find(|p| p.surface == name).unwrap();
        assert!(!p.excluded, "{name}");
    }
}

#[test]
fn jsonl_roundtrip() {
    let c = Corpora::shipped();
    let dir = tempfile::tempdir().unwrap();
    let bias_path = dir.path().join("bias.jsonl");
    let records: Vec<SampleRecord> = c.bias.iter().map(SampleRecord::from).collect();
    write_jsonl(&bias_path, &records).unwrap();
    assert_eq!(read_bias_jsonl(&bias_path).unwrap(), c.bias);

    let hint_path = dir.path().join("hint.jsonl");
    let records: Vec<SampleRecord> = c
        .hint
        .iter()
        .map(|h| SampleRecord::from_hint(h, Scale::Phrase))
        .collect();
    write_jsonl(&hint_path, &records).unwrap();
    assert_eq!(read_hint_jsonl(&hint_path).unwrap(), c.hint);
}

#[test]
fn duplicate_lexicon_entries_are_reported() {
    let mut lex = assets::lexicon();
    lex.push("nurse".into());
    let err = Corpora::build(&lex, &assets::exclusion_rules(), &assets::template_manifest(), 0)
        .unwrap_err();
    assert!(err.to_string().contains("nurse"));
}

proptest! {
    #[test]
    fn any_seed_gives_a_two_one_two_partition(seed in any::<u64>()) {
        let c = Corpora::shipped();
        let s = corpus::split_corpus(&c.bias, seed).unwrap();
        prop_assert_eq!(s.counts().total, [943, 471, 944]);
        let train: HashSet<u64> = s.train.iter().map(|x| x.id).collect();
        prop_assert!(s.test.iter().all(|x| !train.contains(&x.id)));
    }
}
