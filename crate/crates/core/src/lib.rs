//! Cross-lingual debiasing toolkit.
//!
//! Projection-based bias estimators (SentenceDebias, INLP, DensRay), counterfactual
//! data augmentation, CrowS-Pairs pseudo-log-likelihood scoring and the
//! debias-in-X / evaluate-in-Y benchmark grid with its report tables.

pub mod bench;
pub mod cda;
pub mod crows;
pub mod debias;
pub mod error;
pub mod lexicons;
pub mod linalg;
pub mod scorer;

pub use error::{Error, Result};

/// Bias categories studied by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasType {
    Gender,
    Race,
    Religion,
}

impl BiasType {
    pub const ALL: [BiasType; 3] = [BiasType::Gender, BiasType::Race, BiasType::Religion];

    pub fn as_str(&self) -> &'static str {
        match self {
            BiasType::Gender => "gender",
            BiasType::Race => "race",
            BiasType::Religion => "religion",
        }
    }

    /// Abbreviation used in breakdown tables.
    pub fn short(&self) -> &'static str {
        match self {
            BiasType::Gender => "G",
            BiasType::Race => "Ra",
            BiasType::Religion => "Re",
        }
    }
}

impl std::fmt::Display for BiasType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BiasType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gender" => Ok(BiasType::Gender),
            "race" => Ok(BiasType::Race),
            "religion" => Ok(BiasType::Religion),
            other => Err(Error::UnknownLabel { kind: "bias_type", value: other.to_string() }),
        }
    }
}

/// Languages covered by the lexicons and the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Language {
    EN,
    FR,
    DE,
    NL,
}

impl Language {
    pub const ALL: [Language; 4] = [Language::EN, Language::FR, Language::DE, Language::NL];

    pub fn as_str(&self) -> &'static str {
        match self {
            Language::EN => "EN",
            Language::FR => "FR",
            Language::DE => "DE",
            Language::NL => "NL",
        }
    }
}

impl std::fmt::Display for Language {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EN" => Ok(Language::EN),
            "FR" => Ok(Language::FR),
            "DE" => Ok(Language::DE),
            "NL" => Ok(Language::NL),
            other => Err(Error::UnknownLabel { kind: "language", value: other.to_string() }),
        }
    }
}

/// Hex-encoded SHA-256 of a byte string; used for provenance checksums.
pub fn checksum(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
