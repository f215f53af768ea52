//! Counterfactual data augmentation.
//!
//! Sentences containing attribute words are kept and followed by a copy with every
//! attribute word swapped for a counterpart (two-sided CDA).

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::read_to_string;
use crate::lexicons::{build_swap_table, match_attributes, AttributeLexicon, SwapTable};
use crate::{Error, Language, Result};

/// Default fraction of a corpus augmented for additional pretraining.
pub const CDA_FRACTION: f64 = 0.10;
/// Default fraction of a corpus used to fit the projection estimators.
pub const PROJECTION_FRACTION: f64 = 0.025;

/// Ordered tokenized sentences in one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub language: Language,
    pub sentences: Vec<Vec<String>>,
}

/// Whitespace split, lowercased.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

impl Corpus {
    pub fn new(language: Language, sentences: Vec<Vec<String>>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if s.is_empty() || s.iter().any(String::is_empty) {
                return Err(Error::Parse(format!("sentence {i} has an empty token")));
            }
        }
        Ok(Self { language, sentences })
    }

    /// One sentence per line; blank lines are skipped.
    pub fn parse(text: &str, language: Language) -> Self {
        let sentences = text.lines().map(tokenize).filter(|s| !s.is_empty()).collect();
        Self { language, sentences }
    }

    pub fn load(path: impl AsRef<Path>, language: Language) -> Result<Self> {
        Ok(Self::parse(&read_to_string(path)?, language))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SwapRule {
    /// Counterpart in the next class, wrapping.
    #[default]
    Cycle,
    /// Seeded uniform choice among all counterparts.
    Random,
}

impl std::str::FromStr for SwapRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle" => Ok(SwapRule::Cycle),
            "random" => Ok(SwapRule::Random),
            other => Err(Error::UnknownLabel { kind: "swap rule", value: other.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub fraction: f64,
    pub seed: u64,
    pub rule: SwapRule,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { fraction: CDA_FRACTION, seed: 0, rule: SwapRule::Cycle }
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    Ok(())
}

/// `⌈fraction · n⌉`, tolerant of representation error in `fraction` (0.1·30 is 3).
pub fn sample_size(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let size = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    size.clamp(1, n)
}

/// Indices of a uniform sample without replacement, in ascending order.
pub fn sample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    check_fraction(fraction)?;
    let m = sample_size(n, fraction);
    if m == n {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub fn sample_fraction(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    let idx = sample_indices(corpus.len(), fraction, seed)?;
    Ok(Corpus {
        language: corpus.language,
        sentences: idx.into_iter().map(|i| corpus.sentences[i].clone()).collect(),
    })
}

/// RNG for sentence `index` under `seed`; independent of scheduling order.
pub fn sentence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Replaces every attribute token by a counterpart; other tokens are untouched.
pub fn swap_sentence<R: Rng + ?Sized>(
    tokens: &[String],
    table: &SwapTable,
    rule: SwapRule,
    rng: &mut R,
) -> Vec<String> {
    tokens
        .iter()
        .map(|tok| {
            let key = tok.to_lowercase();
            let Some(entry) = table.get(&key) else {
                return tok.clone();
            };
            if let Some(p) = table.partner(&key) {
                return p.to_string();
            }
            match rule {
                SwapRule::Cycle => {
                    let next = (entry.class + 1) % table.n_classes();
                    entry
                        .counterparts
                        .iter()
                        .find(|(c, _)| *c == next)
                        .unwrap_or(&entry.counterparts[0])
                        .1
                        .clone()
                }
                SwapRule::Random => {
                    let pick = rng.random_range(0..entry.counterparts.len());
                    entry.counterparts[pick].1.clone()
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub corpus: Corpus,
    pub sampled: usize,
    pub duplicates: usize,
}

/// Samples `config.fraction` of the corpus and inserts a swapped duplicate right
/// after every sampled sentence with at least one attribute match.
pub fn augment_corpus(corpus: &Corpus, lexicon: &AttributeLexicon, config: &AugmentationConfig) -> Result<Augmented> {
    let table = build_swap_table(lexicon)?;
    let idx = sample_indices(corpus.len(), config.fraction, config.seed)?;
    let blocks: Vec<Vec<Vec<String>>> = idx
        .par_iter()
        .map(|&i| {
            let sent = &corpus.sentences[i];
            if match_attributes(sent, lexicon).is_empty() {
                vec![sent.clone()]
            } else {
                let mut rng = sentence_rng(config.seed, i as u64);
                vec![sent.clone(), swap_sentence(sent, &table, config.rule, &mut rng)]
            }
        })
        .collect();
    let duplicates = blocks.iter().filter(|b| b.len() == 2).count();
    Ok(Augmented {
        corpus: Corpus { language: corpus.language, sentences: blocks.into_iter().flatten().collect() },
        sampled: idx.len(),
        duplicates,
    })
}

/// Sidecar written next to an augmented corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub language: Language,
    pub bias_type: crate::BiasType,
    pub seed: u64,
    pub fraction: f64,
    pub rule: SwapRule,
    pub lexicon_checksum: String,
    pub input_sentences: usize,
    pub sampled_sentences: usize,
    pub duplicates: usize,
    pub output_sentences: usize,
}

impl AugmentManifest {
    pub fn new(input: &Corpus, lexicon: &AttributeLexicon, config: &AugmentationConfig, out: &Augmented) -> Self {
        Self {
            language: input.language,
            bias_type: lexicon.bias_type(),
            seed: config.seed,
            fraction: config.fraction,
            rule: config.rule,
            lexicon_checksum: crate::checksum(lexicon.to_text().as_bytes()),
            input_sentences: input.len(),
            sampled_sentences: out.sampled,
            duplicates: out.duplicates,
            output_sentences: out.corpus.len(),
        }
    }
}

/// Technique whose pretraining step runs outside this toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainTechnique {
    Cda,
    Dropout,
}

/// Training configuration handed to an external pretraining job.
///
/// Dropout probabilities are left `null` for the trainer to supply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStub {
    pub technique: PretrainTechnique,
    pub language: Language,
    pub corpus: String,
    pub corpus_fraction: f64,
    pub seeds: Vec<u64>,
    pub hidden_dropout_prob: Option<f64>,
    pub attention_dropout_prob: Option<f64>,
    pub required_inputs: Vec<String>,
}

impl TrainingStub {
    pub fn cda(language: Language, corpus: impl Into<String>, fraction: f64) -> Self {
        Self {
            technique: PretrainTechnique::Cda,
            language,
            corpus: corpus.into(),
            corpus_fraction: fraction,
            seeds: vec![0, 1, 2],
            hidden_dropout_prob: None,
            attention_dropout_prob: None,
            required_inputs: vec![],
        }
    }

    pub fn dropout(language: Language, corpus: impl Into<String>, fraction: f64) -> Self {
        Self {
            technique: PretrainTechnique::Dropout,
            required_inputs: vec!["hidden_dropout_prob".into(), "attention_dropout_prob".into()],
            ..Self::cda(language, corpus, fraction)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicons::shipped_lexicon;
    use crate::BiasType;

    fn corpus(lines: &[&str]) -> Corpus {
        Corpus::parse(&lines.join("\n"), Language::EN)
    }

    #[test]
    fn fraction_one_is_identity() {
        let c = corpus(&["a b", "c d", "e"]);
        assert_eq!(sample_fraction(&c, 1.0, 7).unwrap(), c);
    }

    #[test]
    fn ceiling_sample_size() {
        assert_eq!(sample_size(100, 0.025), 3);
        assert_eq!(sample_size(30, 0.1), 3);
        assert_eq!(sample_size(10, 0.01), 1);
        let c = Corpus::new(Language::EN, (0..100).map(|i| vec![format!("w{i}")]).collect()).unwrap();
        let s = sample_fraction(&c, 0.025, 1).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn sample_preserves_order() {
        let c = Corpus::new(Language::EN, (0..50).map(|i| vec![format!("{i:03}")]).collect()).unwrap();
        let s = sample_fraction(&c, 0.3, 3).unwrap();
        let mut sorted = s.sentences.clone();
        sorted.sort();
        assert_eq!(s.sentences, sorted);
    }

    #[test]
    fn sample_errors() {
        let empty = Corpus::new(Language::EN, vec![]).unwrap();
        assert!(matches!(sample_fraction(&empty, 0.5, 0), Err(Error::EmptyInput)));
        let c = corpus(&["a"]);
        assert!(sample_fraction(&c, 0.0, 0).is_err());
        assert!(sample_fraction(&c, 1.5, 0).is_err());
    }

    #[test]
    fn swap_english_gender() {
        let table = build_swap_table(&shipped_lexicon(BiasType::Gender, Language::EN)).unwrap();
        let mut rng = sentence_rng(0, 0);
        let out = swap_sentence(&tokenize("he is a father"), &table, SwapRule::Cycle, &mut rng);
        assert_eq!(out.join(" "), "she is a mother");
        let plain = tokenize("the sky is blue");
        assert_eq!(swap_sentence(&plain, &table, SwapRule::Cycle, &mut rng), plain);
        let twice = swap_sentence(&out, &table, SwapRule::Random, &mut rng);
        assert_eq!(twice.join(" "), "he is a father");
    }

    #[test]
    fn swap_religion_cycle_and_random() {
        let table = build_swap_table(&shipped_lexicon(BiasType::Religion, Language::EN)).unwrap();
        let mut rng = sentence_rng(0, 0);
        let s = tokenize("the torah and the quran");
        assert_eq!(swap_sentence(&s, &table, SwapRule::Cycle, &mut rng).join(" "), "the bible and the torah");
        for i in 0..20 {
            let mut rng = sentence_rng(9, i);
            let out = swap_sentence(&s, &table, SwapRule::Random, &mut rng);
            assert!(["bible", "quran"].contains(&out[1].as_str()));
            assert!(["torah", "bible"].contains(&out[4].as_str()));
        }
    }

    #[test]
    fn augment_one_duplicate() {
        let lex = shipped_lexicon(BiasType::Gender, Language::EN);
        let c = corpus(&["he runs", "the cat sleeps"]);
        let cfg = AugmentationConfig { fraction: 1.0, ..Default::default() };
        let out = augment_corpus(&c, &lex, &cfg).unwrap();
        assert_eq!(out.corpus.len(), 3);
        assert_eq!(out.duplicates, 1);
        assert_eq!(out.corpus.sentences[1].join(" "), "she runs");
        assert_eq!(out.corpus.sentences[2].join(" "), "the cat sleeps");
    }

    #[test]
    fn augment_without_matches() {
        let lex = shipped_lexicon(BiasType::Gender, Language::EN);
        let c = corpus(&["a b", "c d", "e f", "g h"]);
        let cfg = AugmentationConfig { fraction: 0.5, seed: 4, rule: SwapRule::Cycle };
        let out = augment_corpus(&c, &lex, &cfg).unwrap();
        assert_eq!(out.corpus, sample_fraction(&c, 0.5, 4).unwrap());
        assert_eq!(out.duplicates, 0);
    }

    #[test]
    fn stubs() {
        let cda = TrainingStub::cda(Language::NL, "out/corpus.txt", 0.1);
        assert_eq!(cda.seeds, vec![0, 1, 2]);
        let d = TrainingStub::dropout(Language::NL, "nl.txt", 0.1);
        assert_eq!(d.hidden_dropout_prob, None);
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"hidden_dropout_prob\":null"));
    }
}
