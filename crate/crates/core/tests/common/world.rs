//! A small synthetic benchmark setup on disk: corpora, CrowS-style pair files,
//! one fixture scorer table that covers all of them, and a config.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use debias_core::cda::{sentence_rng, swap_sentence, tokenize, SwapRule};
use debias_core::lexicons::{build_swap_table, shipped_lexicon, AttributeLexicon};
use debias_core::linalg::EmbeddingMatrix;
use debias_core::scorer::{FixtureTable, MASK_TOKEN};
use debias_core::{BiasType, Language};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 8;
const FILLER: [&str; 9] = ["the", "cat", "sat", "near", "a", "window", "all", "day", "long"];

pub struct World {
    pub dir: tempfile::TempDir,
    pub languages: Vec<Language>,
}

fn word_seed(w: &str) -> u64 {
    let h = debias_core::checksum(w.as_bytes());
    u64::from_str_radix(&h[..16], 16).unwrap()
}

fn lexicons(lang: Language) -> Vec<AttributeLexicon> {
    BiasType::ALL.iter().map(|&b| shipped_lexicon(b, lang)).collect()
}

/// Pseudo-embedding with a planted class offset for attribute words.
fn word_vec(w: &str, lexs: &[AttributeLexicon]) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(word_seed(w));
    let mut v: Vec<f64> = (0..DIM).map(|_| 0.5 * super::gaussian(&mut r)).collect();
    for lex in lexs {
        if let Some(c) = lex.class_of(w) {
            match lex.bias_type() {
                BiasType::Gender => v[0] += if c == 0 { 1.5 } else { -1.5 },
                BiasType::Race => v[(1 + c) % DIM] += 1.5,
                BiasType::Religion => v[(4 + c) % DIM] += 1.5,
            }
        }
    }
    v
}

fn hidden(tokens: &[String], lexs: &[AttributeLexicon]) -> EmbeddingMatrix {
    let vecs: Vec<Vec<f64>> = tokens.iter().map(|t| word_vec(t, lexs)).collect();
    let n = vecs.len() as f64;
    let ctx: Vec<f64> = (0..DIM).map(|j| vecs.iter().map(|v| v[j]).sum::<f64>() / n).collect();
    let rows: Vec<Vec<f64>> = vecs.iter().map(|v| v.iter().zip(&ctx).map(|(a, c)| a + 0.25 * c).collect()).collect();
    EmbeddingMatrix::from_rows(&rows).unwrap()
}

fn single_words(lex: &AttributeLexicon) -> Vec<&Vec<String>> {
    lex.tuples().iter().filter(|t| t.iter().all(|w| !w.contains(' '))).collect()
}

fn sentence(r: &mut ChaCha8Rng, word: &str) -> (Vec<String>, usize) {
    let len = r.random_range(4..8);
    let mut s: Vec<String> = (0..len).map(|_| FILLER[r.random_range(0..FILLER.len())].to_string()).collect();
    let p = r.random_range(0..len);
    s[p] = word.to_string();
    (s, p)
}

/// Corpus lines: each has one attribute word from a random category.
fn corpus(lang: Language, n: usize, seed: u64) -> Vec<Vec<String>> {
    let lexs = lexicons(lang);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let lex = &lexs[r.random_range(0..lexs.len())];
            let tuples = single_words(lex);
            let t = tuples[r.random_range(0..tuples.len())];
            let w = &t[r.random_range(0..t.len())];
            sentence(&mut r, w).0
        })
        .collect()
}

/// (id, more, less, direction, label)
fn pairs(lang: Language, n: usize, seed: u64) -> Vec<(String, String, String, &'static str, &'static str)> {
    let lexs = lexicons(lang);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut out = Vec::new();
    while out.len() < n {
        let bi = r.random_range(0..3);
        let lex = &lexs[bi];
        let tuples = single_words(lex);
        let t = tuples[r.random_range(0..tuples.len())];
        let a = r.random_range(0..t.len());
        let b = (a + 1 + r.random_range(0..t.len() - 1)) % t.len();
        if t[a] == t[b] {
            continue;
        }
        let (s, p) = sentence(&mut r, &t[a]);
        let mut l = s.clone();
        l[p] = t[b].clone();
        let dir = if r.random::<f64>() < 0.75 { "stereo" } else { "antistereo" };
        let label = ["gender", "race-color", "religion"][bi];
        out.push((out.len().to_string(), s.join(" "), l.join(" "), dir, label));
    }
    out
}

impl World {
    /// Writes corpora (`n_corpus` lines), pair files (`n_pairs` rows) and
    /// `fixture.jsonl` for every language.
    pub fn build(languages: &[Language], n_corpus: usize, n_pairs: usize) -> World {
        let dir = tempfile::tempdir().unwrap();
        let mut table = FixtureTable::new();
        let mut vocab: BTreeSet<(Language, String)> = BTreeSet::new();
        for (li, &lang) in languages.iter().enumerate() {
            let lexs = lexicons(lang);
            let sents = corpus(lang, n_corpus, 100 + li as u64);
            let text: Vec<String> = sents.iter().map(|s| s.join(" ")).collect();
            std::fs::write(dir.path().join(format!("corpus_{lang}.txt")), text.join("\n") + "\n").unwrap();
            for (i, s) in sents.iter().enumerate() {
                table.insert_hidden(s, hidden(s, &lexs)).unwrap();
                for lex in &lexs {
                    let swap = build_swap_table(lex).unwrap();
                    let mut rr = sentence_rng(0, i as u64);
                    let sw = swap_sentence(s, &swap, SwapRule::Cycle, &mut rr);
                    table.insert_hidden(&sw, hidden(&sw, &lexs)).unwrap();
                }
            }
            let ps = pairs(lang, n_pairs, 200 + li as u64);
            let mut w = csv::Writer::from_path(dir.path().join(format!("crows_{lang}.csv"))).unwrap();
            w.write_record(["", "sent_more", "sent_less", "stereo_antistereo", "bias_type"]).unwrap();
            for (id, m, l, d, b) in &ps {
                w.write_record([id.as_str(), m, l, d, b]).unwrap();
                for s in [m, l] {
                    let toks = tokenize(s);
                    for (k, t) in toks.iter().enumerate() {
                        vocab.insert((lang, t.clone()));
                        let mut masked = toks.clone();
                        masked[k] = MASK_TOKEN.to_string();
                        table.insert_hidden(&masked, hidden(&masked, &lexs)).unwrap();
                    }
                }
            }
            w.flush().unwrap();
        }
        for (lang, w) in vocab {
            table.insert_vocab(&w, word_vec(&w, &lexicons(lang))).unwrap();
        }
        std::fs::write(dir.path().join("fixture.jsonl"), table.to_text()).unwrap();
        World { dir, languages: languages.to_vec() }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn fixture(&self) -> PathBuf {
        self.path().join("fixture.jsonl")
    }

    /// Config text for the given techniques and seeds. `top` goes before the
    /// first table, `tail` after the last.
    pub fn config(&self, techniques: &[&str], seeds: &[u64], sample_n: usize, top: &str, tail: &str) -> String {
        let langs: Vec<String> = self.languages.iter().map(|l| format!("\"{l}\"")).collect();
        let techs: Vec<String> = techniques.iter().map(|t| format!("\"{t}\"")).collect();
        let seeds: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
        let mut s = format!(
            "languages = [{}]\ntechniques = [{}]\nseeds = [{}]\nsample_n = {sample_n}\noutput_dir = \"out\"\n",
            langs.join(", "),
            techs.join(", "),
            seeds.join(", ")
        );
        s.push_str(top);
        s.push_str("\n[corpora]\n");
        for l in &self.languages {
            s.push_str(&format!("{l} = \"corpus_{l}.txt\"\n"));
        }
        s.push_str("\n[crows]\n");
        for l in &self.languages {
            s.push_str(&format!("{l} = \"crows_{l}.csv\"\n"));
        }
        s.push_str("\n[fit]\ncorpus_fraction = 1.0\nmax_pairs = 200\ninlp_iterations = 8\nprobe_epochs = 150\n");
        s.push_str("\n[scorers]\ndefault = \"fixture:fixture.jsonl\"\n");
        s.push_str(tail);
        s
    }

    pub fn write_config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}
