//! Counterfactual augmentation of a plain-text corpus, plus training stubs
//! for the pretraining jobs that run elsewhere.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use debias_core::cda::{augment_corpus, AugmentManifest, AugmentationConfig, Corpus, SwapRule, TrainingStub};
use debias_core::lexicons::{shipped_lexicon, AttributeLexicon};
use debias_core::{BiasType, Language};

#[derive(Parser)]
#[command(about = "Counterfactual data augmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a fraction of the corpus and add a swapped copy of every sentence with an attribute word.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        language: Language,
        /// Lexicon file; defaults to the shipped one for --bias.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value = "gender")]
        bias: BiasType,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cycle")]
        rule: SwapRule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a dropout training stub; the probabilities are left for the trainer.
    DropoutStub {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        language: Language,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Augment { corpus, language, lexicon, bias, fraction, seed, rule, out } => {
            let lex = match lexicon {
                Some(p) => AttributeLexicon::parse_any(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => shipped_lexicon(bias, language),
            };
            anyhow::ensure!(
                lex.language() == language,
                "lexicon is for {} but the corpus is {language}",
                lex.language()
            );
            let input = Corpus::load(&corpus, language)?;
            let cfg = AugmentationConfig { fraction, seed, rule };
            let aug = augment_corpus(&input, &lex, &cfg)?;
            fs::create_dir_all(&out)?;
            let corpus_out = out.join("corpus.txt");
            fs::write(&corpus_out, aug.corpus.to_text())?;
            write_json(&out.join("manifest.json"), &AugmentManifest::new(&input, &lex, &cfg, &aug))?;
            write_json(&out.join("training.json"), &TrainingStub::cda(language, corpus_out.display().to_string(), fraction))?;
            log::info!(
                "{} sentences in, {} sampled, {} swapped copies, {} out",
                input.len(),
                aug.sampled,
                aug.duplicates,
                aug.corpus.len()
            );
        }
        Cmd::DropoutStub { corpus, language, fraction, out } => {
            fs::create_dir_all(&out)?;
            write_json(&out.join("training.json"), &TrainingStub::dropout(language, corpus.display().to_string(), fraction))?;
        }
    }
    Ok(())
}
