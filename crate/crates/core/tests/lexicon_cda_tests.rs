mod common;

use common::*;
use debias_core::cda::*;
use debias_core::lexicons::*;
use debias_core::{BiasType, Error, Language};
use rand::Rng;

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

#[test]
fn english_gender_pair() {
    let t = build_swap_table(&shipped_lexicon(BiasType::Gender, Language::EN)).unwrap();
    assert_eq!(t.partner("he"), Some("she"));
    assert_eq!(t.partner("she"), Some("he"));
}

#[test]
fn english_religion_groups() {
    let lex = shipped_lexicon(BiasType::Religion, Language::EN);
    assert_eq!(lex.n_classes(), 3);
    assert_eq!(lex.tuples()[0], vec!["jewish", "christian", "muslim"]);
    let t = build_swap_table(&lex).unwrap();
    let cps: Vec<&str> = t.get("torah").unwrap().counterparts.iter().map(|(_, w)| w.as_str()).collect();
    assert_eq!(cps, vec!["bible", "quran"]);
}

#[test]
fn gender_swap_is_involution_for_every_language() {
    for lang in Language::ALL {
        let lex = shipped_lexicon(BiasType::Gender, lang);
        let t = build_swap_table(&lex).unwrap();
        assert!(!t.is_empty());
        for (w, _) in t.iter() {
            let p = t.partner(w).unwrap();
            assert_eq!(t.partner(p), Some(w), "{lang}: {w}");
        }
    }
}

#[test]
fn every_shipped_lexicon_parses_and_round_trips() {
    for bias in BiasType::ALL {
        for lang in Language::ALL {
            let lex = shipped_lexicon(bias, lang);
            assert_eq!(lex.bias_type(), bias);
            assert_eq!(lex.language(), lang);
            let again = AttributeLexicon::parse(&lex.to_text(), bias, lang).unwrap();
            assert_eq!(again, lex);
            assert_eq!(AttributeLexicon::parse_any(&lex.to_text()).unwrap(), lex);
            for (c, words) in lex.classes().iter().enumerate() {
                for w in words {
                    assert_eq!(lex.class_of(w), Some(c));
                }
            }
        }
    }
}

#[test]
fn duplicate_gender_word_rejected() {
    let text = "gender EN 2\nactor, actress\nactor, actrice\n";
    assert!(matches!(
        AttributeLexicon::parse(text, BiasType::Gender, Language::EN),
        Err(Error::DuplicateWord { .. })
    ));
}

#[test]
fn cross_class_word_rejected() {
    let text = "race EN 2\nblack, white\nwhite, black\n";
    assert!(matches!(
        AttributeLexicon::parse(text, BiasType::Race, Language::EN),
        Err(Error::DuplicateWord { .. })
    ));
}

#[test]
fn misaligned_tuple_rejected() {
    let text = "religion EN 3\njewish, christian\n";
    assert!(matches!(
        AttributeLexicon::parse(text, BiasType::Religion, Language::EN),
        Err(Error::Lexicon { .. })
    ));
}

#[test]
fn header_mismatch_rejected() {
    let text = "gender FR 2\nil, elle\n";
    assert!(AttributeLexicon::parse(text, BiasType::Gender, Language::EN).is_err());
}

#[test]
fn load_from_dir_overrides_shipped() {
    let dir = tempfile::tempdir().unwrap();
    let name = lexicon_file_name(BiasType::Gender, Language::NL);
    std::fs::write(dir.path().join(&name), "gender NL 2\nhij, zij\n").unwrap();
    let lex = load_from_dir(Some(dir.path()), BiasType::Gender, Language::NL).unwrap();
    assert_eq!(lex.tuples().len(), 1);
    assert_eq!(load_from_dir(None, BiasType::Gender, Language::NL).unwrap(), shipped_lexicon(BiasType::Gender, Language::NL));
    assert!(load_from_dir(Some(dir.path()), BiasType::Race, Language::NL).is_err());
}

#[test]
fn matching_is_exact_token() {
    let lex = shipped_lexicon(BiasType::Gender, Language::EN);
    let m = match_attributes(&toks("He said hello to the heroes"), &lex);
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].position, 0);
    assert_eq!(m[0].word, "he");
}

const FILLER: [&str; 8] = ["the", "sky", "was", "blue", "today", "and", "very", "quiet"];

/// Random sentences over filler words and a few gender words; `density` is the
/// per-sentence chance of containing at least one attribute.
fn synthetic_corpus(seed: u64, n: usize, density: f64) -> (Corpus, usize) {
    let mut r = rng(seed);
    let attrs = ["he", "she", "mother", "father", "king", "queen"];
    let mut with_attr = 0;
    let mut lines = Vec::new();
    for _ in 0..n {
        let len = r.random_range(3..9);
        let mut s: Vec<&str> = (0..len).map(|_| FILLER[r.random_range(0..FILLER.len())]).collect();
        if r.random::<f64>() < density {
            let pos = r.random_range(0..len);
            s[pos] = attrs[r.random_range(0..attrs.len())];
            with_attr += 1;
        }
        lines.push(s.join(" "));
    }
    (Corpus::parse(&lines.join("\n"), Language::EN), with_attr)
}

#[test]
fn augmented_size_matches_recount() {
    let (corpus, _) = synthetic_corpus(1, 200, 0.3);
    let lex = shipped_lexicon(BiasType::Gender, Language::EN);
    let cfg = AugmentationConfig { fraction: 0.1, seed: 7, rule: SwapRule::Cycle };
    let out = augment_corpus(&corpus, &lex, &cfg).unwrap();
    assert_eq!(out.sampled, 20);
    let idx = sample_indices(corpus.len(), 0.1, 7).unwrap();
    let brute = idx
        .iter()
        .filter(|&&i| corpus.sentences[i].iter().any(|w| lex.class_of(w).is_some()))
        .count();
    assert_eq!(out.duplicates, brute);
    assert_eq!(out.corpus.len(), 20 + brute);
}

#[test]
fn augmented_duplicates_follow_originals_and_swap_back() {
    let (corpus, _) = synthetic_corpus(2, 300, 0.5);
    let lex = shipped_lexicon(BiasType::Gender, Language::EN);
    let table = build_swap_table(&lex).unwrap();
    let out = augment_corpus(&corpus, &lex, &AugmentationConfig { fraction: 0.2, seed: 3, rule: SwapRule::Cycle }).unwrap();
    let s = &out.corpus.sentences;
    let mut i = 0;
    let mut seen = 0;
    while i < s.len() {
        if !match_attributes(&s[i], &lex).is_empty() {
            let dup = &s[i + 1];
            assert_eq!(dup.len(), s[i].len());
            let mut r = sentence_rng(0, 0);
            assert_eq!(&swap_sentence(dup, &table, SwapRule::Cycle, &mut r), &s[i]);
            i += 2;
            seen += 1;
        } else {
            i += 1;
        }
    }
    assert_eq!(seen, out.duplicates);
}

#[test]
fn augmentation_is_deterministic_and_seed_sensitive() {
    let (corpus, _) = synthetic_corpus(3, 500, 0.3);
    let lex = shipped_lexicon(BiasType::Gender, Language::EN);
    let cfg = AugmentationConfig { fraction: 0.1, seed: 11, rule: SwapRule::Cycle };
    let a = augment_corpus(&corpus, &lex, &cfg).unwrap();
    let b = augment_corpus(&corpus, &lex, &cfg).unwrap();
    assert_eq!(a.corpus.to_text(), b.corpus.to_text());
    let c = augment_corpus(&corpus, &lex, &AugmentationConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.corpus.to_text(), c.corpus.to_text());
}

#[test]
fn random_rule_stays_within_counterparts() {
    let lex = shipped_lexicon(BiasType::Religion, Language::EN);
    let table = build_swap_table(&lex).unwrap();
    for i in 0..50 {
        let mut r = sentence_rng(5, i);
        let out = swap_sentence(&toks("the torah is old"), &table, SwapRule::Random, &mut r);
        assert!(out[1] == "bible" || out[1] == "quran");
        assert_eq!(out[0], "the");
    }
    let mut r = sentence_rng(0, 0);
    let cyc = swap_sentence(&toks("the quran is old"), &table, SwapRule::Cycle, &mut r);
    assert_eq!(cyc[1], "torah");
}

#[test]
fn sample_size_ceiling() {
    assert_eq!(sample_size(30, 0.1), 3);
    assert_eq!(sample_size(31, 0.1), 4);
    assert_eq!(sample_size(5, 0.025), 1);
    assert_eq!(sample_size(1000, 0.025), 25);
    assert_eq!(sample_size(10, 1.0), 10);
}

#[test]
fn sample_indices_guards() {
    assert!(matches!(sample_indices(0, 0.1, 0), Err(Error::EmptyInput)));
    assert!(sample_indices(10, 0.0, 0).is_err());
    assert!(sample_indices(10, 1.5, 0).is_err());
    let idx = sample_indices(100, 0.3, 4).unwrap();
    assert_eq!(idx.len(), 30);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn corpus_round_trip_and_manifest() {
    let (corpus, _) = synthetic_corpus(4, 40, 0.3);
    let again = Corpus::parse(&corpus.to_text(), Language::EN);
    assert_eq!(again, corpus);
    let lex = shipped_lexicon(BiasType::Gender, Language::EN);
    let cfg = AugmentationConfig::default();
    let out = augment_corpus(&corpus, &lex, &cfg).unwrap();
    let m = AugmentManifest::new(&corpus, &lex, &cfg, &out);
    assert_eq!(m.input_sentences, 40);
    assert_eq!(m.output_sentences, m.sampled_sentences + m.duplicates);
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<AugmentManifest>(&json).unwrap(), m);
}

#[test]
fn training_stubs() {
    let c = TrainingStub::cda(Language::FR, "corpus.txt", 0.1);
    assert!(c.required_inputs.is_empty());
    let d = TrainingStub::dropout(Language::FR, "corpus.txt", 0.1);
    assert_eq!(d.technique, PretrainTechnique::Dropout);
    assert!(d.hidden_dropout_prob.is_none());
    assert_eq!(d.required_inputs.len(), 2);
}
