//! Multilingual attribute word lists and the swap tables derived from them.
//!
//! File format (UTF-8): `#` starts a comment, the first non-comment line is the
//! header `bias_type language n_classes`, and every following line is one
//! comma-separated tuple with one member per class, position-aligned.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::read_to_string;
use crate::{BiasType, Error, Language, Result};

/// Attribute words for one (bias type, language).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeLexicon {
    bias_type: BiasType,
    language: Language,
    n_classes: usize,
    /// Aligned tuples in file order.
    tuples: Vec<Vec<String>>,
    /// Per-class words, deduplicated, first-appearance order.
    classes: Vec<Vec<String>>,
    class_of: HashMap<String, usize>,
}

impl AttributeLexicon {
    /// Builds and validates a lexicon from aligned tuples.
    ///
    /// Gender lexicons are paired: two classes and every word in exactly one pair.
    /// Race and religion lexicons are grouped: a word may recur across tuples but
    /// only within its own class.
    pub fn new(
        bias_type: BiasType,
        language: Language,
        n_classes: usize,
        tuples: Vec<Vec<String>>,
    ) -> Result<Self> {
        let origin = format!("{bias_type}/{language}");
        let lex_err = |reason: String| Error::Lexicon { path: origin.clone(), reason };
        if n_classes == 0 {
            return Err(lex_err("n_classes must be positive".into()));
        }
        if bias_type == BiasType::Gender && n_classes != 2 {
            return Err(lex_err(format!("gender lexicons are paired, got {n_classes} classes")));
        }
        let mut classes: Vec<Vec<String>> = vec![Vec::new(); n_classes];
        let mut class_of: HashMap<String, usize> = HashMap::new();
        let mut tuple_of: HashMap<String, usize> = HashMap::new();
        let mut normalized = Vec::with_capacity(tuples.len());
        for (t, tuple) in tuples.into_iter().enumerate() {
            if tuple.len() != n_classes {
                return Err(lex_err(format!(
                    "misaligned tuple {t}: {} members for {n_classes} classes",
                    tuple.len()
                )));
            }
            let tuple: Vec<String> = tuple.into_iter().map(|w| w.trim().to_lowercase()).collect();
            for (c, word) in tuple.iter().enumerate() {
                if word.is_empty() {
                    return Err(lex_err(format!("empty member in tuple {t}")));
                }
                match class_of.get(word) {
                    Some(&prev) if prev != c => {
                        return Err(Error::DuplicateWord {
                            word: word.clone(),
                            detail: format!("classes {prev} and {c}"),
                        })
                    }
                    Some(_) if bias_type == BiasType::Gender => {
                        return Err(Error::DuplicateWord {
                            word: word.clone(),
                            detail: format!("pairs {} and {t}", tuple_of[word]),
                        })
                    }
                    Some(_) => {}
                    None => {
                        class_of.insert(word.clone(), c);
                        tuple_of.insert(word.clone(), t);
                        classes[c].push(word.clone());
                    }
                }
            }
            normalized.push(tuple);
        }
        Ok(Self { bias_type, language, n_classes, tuples: normalized, classes, class_of })
    }

    pub fn parse(text: &str, bias_type: BiasType, language: Language) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Lexicon {
            path: format!("{bias_type}/{language}"),
            reason: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [bt, lang, n] = fields[..] else {
            return Err(Error::Lexicon {
                path: format!("{bias_type}/{language}"),
                reason: format!("bad header {header:?}"),
            });
        };
        let file_bias: BiasType = bt.parse()?;
        let file_lang: Language = lang.parse()?;
        if file_bias != bias_type || file_lang != language {
            return Err(Error::Lexicon {
                path: format!("{bias_type}/{language}"),
                reason: format!("header declares {file_bias}/{file_lang}"),
            });
        }
        let n_classes: usize = n
            .parse()
            .map_err(|_| Error::Parse(format!("n_classes {n:?} is not a count")))?;
        let tuples = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Self::new(bias_type, language, n_classes, tuples)
    }

    /// Parses a lexicon whose bias type and language are taken from its header.
    pub fn parse_any(text: &str) -> Result<Self> {
        let header = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .find(|l| !l.is_empty())
            .ok_or_else(|| Error::Parse("lexicon has no header".into()))?;
        let mut fields = header.split_whitespace();
        let bias_type: BiasType = fields.next().unwrap_or_default().parse()?;
        let language: Language = fields.next().unwrap_or_default().parse()?;
        Self::parse(text, bias_type, language)
    }

    pub fn load(path: impl AsRef<Path>, bias_type: BiasType, language: Language) -> Result<Self> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        Self::parse(&text, bias_type, language).map_err(|e| match e {
            Error::Lexicon { reason, .. } => Error::Lexicon { path: path.display().to_string(), reason },
            other => other,
        })
    }

    /// Serializes to the file format (comments are not preserved).
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.bias_type, self.language, self.n_classes);
        for t in &self.tuples {
            s.push_str(&t.join(", "));
            s.push('\n');
        }
        s
    }

    pub fn bias_type(&self) -> BiasType {
        self.bias_type
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn classes(&self) -> &[Vec<String>] {
        &self.classes
    }

    pub fn tuples(&self) -> &[Vec<String>] {
        &self.tuples
    }

    /// Swap pairs for paired (gender) lexicons.
    pub fn pairing(&self) -> Option<&[Vec<String>]> {
        self.is_paired().then_some(self.tuples.as_slice())
    }

    pub fn is_paired(&self) -> bool {
        self.bias_type == BiasType::Gender
    }

    pub fn class_of(&self, word: &str) -> Option<usize> {
        self.class_of.get(word).copied()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().flatten().map(String::as_str)
    }
}

/// File name of a lexicon in a lexicon directory, e.g. `en_gender.txt`.
pub fn lexicon_file_name(bias_type: BiasType, language: Language) -> String {
    format!("{}_{}.txt", language.as_str().to_lowercase(), bias_type)
}

macro_rules! shipped {
    ($($lang:ident $bias:ident $file:literal),* $(,)?) => {
        fn shipped_text(bias_type: BiasType, language: Language) -> &'static str {
            match (language, bias_type) {
                $((Language::$lang, BiasType::$bias) => include_str!(concat!("../data/lexicons/", $file)),)*
            }
        }
    };
}

shipped! {
    EN Gender "en_gender.txt", EN Race "en_race.txt", EN Religion "en_religion.txt",
    FR Gender "fr_gender.txt", FR Race "fr_race.txt", FR Religion "fr_religion.txt",
    DE Gender "de_gender.txt", DE Race "de_race.txt", DE Religion "de_religion.txt",
    NL Gender "nl_gender.txt", NL Race "nl_race.txt", NL Religion "nl_religion.txt",
}

/// One of the twelve lexicons compiled into the crate.
pub fn shipped_lexicon(bias_type: BiasType, language: Language) -> AttributeLexicon {
    AttributeLexicon::parse(shipped_text(bias_type, language), bias_type, language)
        .expect("shipped lexicons are valid")
}

/// Loads `dir/<lexicon_file_name>`, or the shipped copy when `dir` is `None`.
pub fn load_from_dir(dir: Option<&Path>, bias_type: BiasType, language: Language) -> Result<AttributeLexicon> {
    match dir {
        Some(d) => AttributeLexicon::load(d.join(lexicon_file_name(bias_type, language)), bias_type, language),
        None => Ok(shipped_lexicon(bias_type, language)),
    }
}

/// Counterparts of one attribute word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapEntry {
    pub class: usize,
    /// `(class, word)` in class order, then first-appearance order.
    pub counterparts: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapTable {
    paired: bool,
    n_classes: usize,
    entries: BTreeMap<String, SwapEntry>,
}

impl SwapTable {
    pub fn get(&self, word: &str) -> Option<&SwapEntry> {
        self.entries.get(word)
    }

    /// The unique partner of a word in a paired table.
    pub fn partner(&self, word: &str) -> Option<&str> {
        if !self.paired {
            return None;
        }
        self.entries.get(word).map(|e| e.counterparts[0].1.as_str())
    }

    pub fn is_paired(&self) -> bool {
        self.paired
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SwapEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

pub fn build_swap_table(lex: &AttributeLexicon) -> Result<SwapTable> {
    if lex.n_classes < 2 {
        return Err(Error::Lexicon {
            path: format!("{}/{}", lex.bias_type, lex.language),
            reason: "single-class lexicon has nothing to swap to".into(),
        });
    }
    let mut entries: BTreeMap<String, SwapEntry> = BTreeMap::new();
    for (t, tuple) in lex.tuples.iter().enumerate() {
        if tuple.len() != lex.n_classes {
            return Err(Error::Lexicon {
                path: format!("{}/{}", lex.bias_type, lex.language),
                reason: format!("misaligned tuple {t}"),
            });
        }
        for (c, word) in tuple.iter().enumerate() {
            let entry = entries
                .entry(word.clone())
                .or_insert_with(|| SwapEntry { class: c, counterparts: Vec::new() });
            for (oc, other) in tuple.iter().enumerate() {
                if oc != c && !entry.counterparts.iter().any(|(_, w)| w == other) {
                    entry.counterparts.push((oc, other.clone()));
                }
            }
        }
    }
    for e in entries.values_mut() {
        // stable: keeps first-appearance order within a class
        e.counterparts.sort_by_key(|(c, _)| *c);
    }
    Ok(SwapTable { paired: lex.is_paired(), n_classes: lex.n_classes, entries })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeMatch {
    pub position: usize,
    pub word: String,
    pub class: usize,
}

/// Exact full-token matches, left to right.
pub fn match_attributes<S: AsRef<str>>(tokens: &[S], lex: &AttributeLexicon) -> Vec<AttributeMatch> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(position, tok)| {
            let word = tok.as_ref().to_lowercase();
            lex.class_of(&word).map(|class| AttributeMatch { position, word, class })
        })
        .collect()
}
