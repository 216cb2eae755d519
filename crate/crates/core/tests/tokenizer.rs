use proptest::prelude::*;
use redbert_core::tokenizer::*;
use redbert_core::Error;

fn vocab(extra: &[&str]) -> Vocab {
    let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    t.extend(extra.iter().map(|s| s.to_string()));
    Vocab::from_tokens(t).unwrap()
}

fn pieces(ids: &[usize], v: &Vocab) -> Vec<String> {
    ids.iter().map(|&i| v.token(i).unwrap().to_string()).collect()
}

#[test]
fn running_shoes_splits_greedily() {
    let v = vocab(&["run", "##ning", "shoe", "##s", "i", "want"]);
    let ids = wordpiece_tokenize("running shoes", &v);
    assert_eq!(pieces(&ids, &v), ["run", "##ning", "shoe", "##s"]);
}

#[test]
fn longest_prefix_wins_without_backtracking() {
    let v = vocab(&["run", "runn", "##ning", "##ing"]);
    assert_eq!(pieces(&wordpiece_tokenize("running", &v), &v), ["runn", "##ing"]);
    let v = vocab(&["run", "runn", "##ning"]);
    assert_eq!(wordpiece_tokenize("running", &v), vec![v.unk_id()]);
}

#[test]
fn empty_text_gives_no_pieces() {
    let v = vocab(&["a"]);
    assert!(wordpiece_tokenize("", &v).is_empty());
    assert!(wordpiece_tokenize("   \t\n", &v).is_empty());
}

#[test]
fn unmatched_word_is_unk() {
    let v = vocab(&["z", "shoe"]);
    assert_eq!(wordpiece_tokenize("zzzz", &v), vec![v.unk_id()]);
    let v = vocab(&["shoe"]);
    assert_eq!(pieces(&wordpiece_tokenize("zzzz shoe", &v), &v), ["[UNK]", "shoe"]);
}

#[test]
fn partial_match_falls_back_to_unk_for_whole_word() {
    let v = vocab(&["shoe", "##s"]);
    assert_eq!(wordpiece_tokenize("shoex", &v), vec![v.unk_id()]);
}

#[test]
fn uppercase_input_is_lowercased() {
    let v = vocab(&["milk"]);
    assert_eq!(wordpiece_tokenize("MILK Milk", &v), vec![v.id("milk").unwrap(); 2]);
}

#[test]
fn overlong_word_is_unk() {
    let v = vocab(&["a", "##a"]);
    let long = "a".repeat(MAX_WORD_CHARS + 1);
    assert_eq!(wordpiece_tokenize(&long, &v), vec![v.unk_id()]);
    let ok = "a".repeat(MAX_WORD_CHARS);
    assert_eq!(wordpiece_tokenize(&ok, &v).len(), MAX_WORD_CHARS);
}

#[test]
fn single_segment_is_padded() {
    let v = vocab(&["a1", "a2"]);
    let p = encode_pair("a1 a2", None, &v, 8).unwrap();
    let (cls, sep, pad) = (v.cls_id(), v.sep_id(), v.pad_id());
    let (a1, a2) = (v.id("a1").unwrap(), v.id("a2").unwrap());
    assert_eq!(p.ids, vec![cls, a1, a2, sep, pad, pad, pad, pad]);
    assert_eq!(p.attention_mask, vec![1, 1, 1, 1, 0, 0, 0, 0]);
    assert_eq!(p.segment_ids, vec![0; 8]);
}

#[test]
fn long_pair_fills_max_len_exactly() {
    let v = vocab(&["x"]);
    let a = vec![v.id("x").unwrap(); 100];
    let p = encode_ids(&a, Some(&a), &v, 128).unwrap();
    assert_eq!(p.len(), 128);
    assert_eq!(p.real_len(), 128);
    let seps = p.ids.iter().filter(|&&i| i == v.sep_id()).count();
    assert_eq!(seps, 2);
    // 125 content tokens split as evenly as the tie rule allows.
    let b_len = p.segment_ids.iter().filter(|&&s| s == 1).count() - 1;
    assert_eq!(b_len, 62);
}

#[test]
fn segment_ids_switch_after_first_sep() {
    let v = vocab(&["remove", "an", "item", "from", "cart", "show", "my"]);
    let p = encode_pair("remove an item from cart", Some("show my cart"), &v, 16).unwrap();
    let first_sep = p.ids.iter().position(|&i| i == v.sep_id()).unwrap();
    assert_eq!(first_sep, 6);
    assert!(p.segment_ids[..=first_sep].iter().all(|&s| s == 0));
    assert!(p.segment_ids[first_sep + 1..p.real_len()].iter().all(|&s| s == 1));
}

#[test]
fn max_len_below_three_is_config_error() {
    let v = vocab(&[]);
    assert!(matches!(encode_pair("", None, &v, 2), Err(Error::Config(_))));
    assert!(encode_pair("", None, &v, 3).is_ok());
}

#[test]
fn nine_line_vocab_has_nine_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    std::fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nrun\n##ning\nshoe\n##s\n").unwrap();
    let v = load_vocab(&path).unwrap();
    assert_eq!(v.len(), 9);
    assert_eq!(v.id("shoe"), Some(7));
    assert_eq!(v.token(6), Some("##ning"));
}

#[test]
fn vocab_missing_mask_names_it() {
    match parse_vocab("[PAD]\n[UNK]\n[CLS]\n[SEP]\nshoe\n") {
        Err(Error::Config(m)) => assert!(m.contains("[MASK]"), "{m}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn duplicate_vocab_line_names_token() {
    match parse_vocab("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nshoe\nshoe\n") {
        Err(Error::Config(m)) => assert!(m.contains("shoe"), "{m}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn empty_vocab_is_config_error() {
    assert!(matches!(parse_vocab(""), Err(Error::Config(_))));
}

#[test]
fn vocab_text_round_trips() {
    let v = vocab(&["run", "##ning"]);
    assert_eq!(parse_vocab(&v.to_text()).unwrap(), v);
}

fn word_vocab() -> (Vocab, Vec<&'static str>) {
    let words = vec!["add", "milk", "to", "my", "cart", "running", "shoes", "great", "value"];
    let mut extra: Vec<&str> = words.clone();
    extra.extend(["run", "##ning", "shoe", "##s", "car", "##t"]);
    (vocab(&extra), words)
}

proptest! {
    #[test]
    fn in_vocab_sentences_round_trip(idx in prop::collection::vec(0usize..9, 0..20), upper in any::<bool>()) {
        let (v, words) = word_vocab();
        let sentence: Vec<&str> = idx.iter().map(|&i| words[i]).collect();
        let text = sentence.join("  ");
        let text = if upper { text.to_uppercase() } else { text };
        let ids = wordpiece_tokenize(&text, &v);
        prop_assert_eq!(detokenize(&ids, &v), sentence.join(" "));
    }

    #[test]
    fn packed_pairs_are_well_formed(
        a in prop::collection::vec(5usize..20, 0..60),
        b in prop::option::of(prop::collection::vec(5usize..20, 0..60)),
        max_len in 3usize..64,
    ) {
        let (v, _) = word_vocab();
        let p = encode_ids(&a, b.as_deref(), &v, max_len).unwrap();
        prop_assert_eq!(p.len(), max_len);
        prop_assert_eq!(p.segment_ids.len(), max_len);
        prop_assert_eq!(p.ids.iter().filter(|&&i| i == v.cls_id()).count(), 1);
        prop_assert_eq!(p.ids[0], v.cls_id());
        prop_assert!(p.attention_mask.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(p.segment_ids.windows(2).all(|w| w[0] <= w[1]));
        let content = p.real_len() - if b.is_some() { 3 } else { 2 };
        prop_assert!(content <= a.len() + b.as_ref().map_or(0, Vec::len));
        prop_assert!(p.ids[p.real_len()..].iter().all(|&i| i == v.pad_id()));
    }

    #[test]
    fn tokenization_is_pure(text in "[a-z ]{0,40}") {
        let (v, _) = word_vocab();
        prop_assert_eq!(wordpiece_tokenize(&text, &v), wordpiece_tokenize(&text, &v));
    }
}
