//! The debias-in-X / evaluate-in-Y grid, its result records and the report tables
//! built from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cda::{sample_fraction, Corpus, PROJECTION_FRACTION};
use crate::crows::{
    aggregate_deviation, deviation, load_crows_csv, mean_scores, sample_eval_set, score_pair, summarize,
    AggregationOrder, BiasScore, EvalSample, SentencePair, DEFAULT_SAMPLE_N,
};
use crate::debias::{collect_attribute_reps, fit_model, DebiasModel, DebiasTechnique, EstimatorConfig, Pooling};
use crate::error::read_to_string;
use crate::lexicons::{build_swap_table, load_from_dir};
use crate::scorer::{register_projection, FixtureScorer, FixtureTable, ProjectionHandle, ProjectionSpec, Scorer, ScorerSpec};
use crate::{BiasType, Error, Language, Result};

/// Overcompensation threshold in percentage points.
pub const OVERCOMPENSATION_EPS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Technique {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "inlp")]
    Inlp,
    #[serde(rename = "sendeb")]
    SenDeb,
    #[serde(rename = "densray")]
    DensRay,
    #[serde(rename = "cda-extern")]
    CdaExtern,
    #[serde(rename = "do-extern")]
    DoExtern,
}

impl Technique {
    pub const ALL: [Technique; 6] = [
        Technique::None,
        Technique::Inlp,
        Technique::SenDeb,
        Technique::DensRay,
        Technique::CdaExtern,
        Technique::DoExtern,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Technique::None => "none",
            Technique::Inlp => "inlp",
            Technique::SenDeb => "sendeb",
            Technique::DensRay => "densray",
            Technique::CdaExtern => "cda-extern",
            Technique::DoExtern => "do-extern",
        }
    }

    /// Column header in rendered tables.
    pub fn label(&self) -> &'static str {
        match self {
            Technique::None => "Base",
            Technique::Inlp => "INLP",
            Technique::SenDeb => "SenDeb",
            Technique::DensRay => "DR",
            Technique::CdaExtern => "CDA",
            Technique::DoExtern => "DO",
        }
    }

    /// The projection estimator behind this technique, if any.
    pub fn estimator(&self) -> Option<DebiasTechnique> {
        match self {
            Technique::Inlp => Some(DebiasTechnique::Inlp),
            Technique::SenDeb => Some(DebiasTechnique::SenDeb),
            Technique::DensRay => Some(DebiasTechnique::DensRay),
            _ => None,
        }
    }

    /// Scored through an externally pretrained checkpoint.
    pub fn is_extern(&self) -> bool {
        matches!(self, Technique::CdaExtern | Technique::DoExtern)
    }

    /// DensRay is binary and only fitted for gender; other categories are scored
    /// without projection.
    pub fn applies_to(&self, bias: BiasType) -> bool {
        !(matches!(self, Technique::DensRay) && bias != BiasType::Gender)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Technique::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or(Error::UnknownLabel { kind: "technique", value: s })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub debias_language: Language,
    pub eval_language: Language,
    pub technique: Technique,
    pub seed: u64,
}

impl fmt::Display for GridCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}→{} {} seed {}", self.debias_language, self.eval_language, self.technique, self.seed)
    }
}

// ---------------------------------------------------------------------------
// configuration

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_sample_n() -> usize {
    DEFAULT_SAMPLE_N
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_fraction() -> f64 {
    PROJECTION_FRACTION
}

fn default_max_pairs() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Corpus fraction sampled before collecting attribute occurrences.
    #[serde(default = "default_fraction")]
    pub corpus_fraction: f64,
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub sendeb_k: Option<usize>,
    #[serde(default)]
    pub inlp_iterations: Option<usize>,
    #[serde(default)]
    pub inlp_margin: Option<f64>,
    #[serde(default)]
    pub probe_epochs: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            corpus_fraction: default_fraction(),
            max_pairs: default_max_pairs(),
            pooling: Pooling::default(),
            sendeb_k: None,
            inlp_iterations: None,
            inlp_margin: None,
            probe_epochs: None,
        }
    }
}

impl FitConfig {
    pub fn estimator(&self, seed: u64) -> EstimatorConfig {
        let mut cfg = EstimatorConfig { sendeb_k: self.sendeb_k, ..EstimatorConfig::default() };
        if let Some(n) = self.inlp_iterations {
            cfg.inlp.n_iterations = n;
        }
        if let Some(m) = self.inlp_margin {
            cfg.inlp.stop_accuracy_margin = m;
        }
        if let Some(e) = self.probe_epochs {
            cfg.inlp.probe.epochs = e;
        }
        cfg.inlp.seed = seed;
        cfg
    }
}

/// Scorer endpoints. Lookup order for a cell: `"<technique>@<seed>"`, then
/// `"<technique>"`, then `default`. `{seed}`, `{lang}` (debias language) and
/// `{eval}` are substituted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Evaluation languages.
    pub languages: Vec<Language>,
    /// Debiasing languages; defaults to `languages`.
    #[serde(default)]
    pub debias_languages: Option<Vec<Language>>,
    pub techniques: Vec<Technique>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_sample_n")]
    pub sample_n: usize,
    #[serde(default)]
    pub corpora: BTreeMap<Language, PathBuf>,
    pub crows: BTreeMap<Language, PathBuf>,
    #[serde(default)]
    pub lexicon_dir: Option<PathBuf>,
    pub scorers: ScorerConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub aggregation: AggregationOrder,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl BenchConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&read_to_string(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("no evaluation languages".into()));
        }
        if self.techniques.is_empty() {
            return Err(Error::Config("no techniques".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if self.sample_n == 0 {
            return Err(Error::Config("sample_n must be ≥ 1".into()));
        }
        if !(self.fit.corpus_fraction > 0.0 && self.fit.corpus_fraction <= 1.0) {
            return Err(Error::Config("fit.corpus_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn debias_languages(&self) -> &[Language] {
        self.debias_languages.as_deref().unwrap_or(&self.languages)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Every cell of the grid, in canonical order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &x in self.debias_languages() {
            for &y in &self.languages {
                for &t in &self.techniques {
                    for &seed in &self.seeds {
                        out.push(GridCell { debias_language: x, eval_language: y, technique: t, seed });
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }

    pub fn scorer_for(&self, t: Technique, seed: u64, x: Language, y: Language) -> Result<ScorerSpec> {
        let from_override = self
            .scorers
            .overrides
            .get(&format!("{t}@{seed}"))
            .or_else(|| self.scorers.overrides.get(t.as_str()));
        let template = match from_override {
            Some(s) => s,
            None if t.is_extern() => {
                return Err(Error::Config(format!("no scorer endpoint configured for {t}")));
            }
            None => self
                .scorers
                .default
                .as_ref()
                .ok_or_else(|| Error::Config("no default scorer configured".into()))?,
        };
        let text = template
            .replace("{seed}", &seed.to_string())
            .replace("{lang}", x.as_str())
            .replace("{eval}", y.as_str());
        Ok(match text.parse::<ScorerSpec>()? {
            ScorerSpec::Fixture(p) => ScorerSpec::Fixture(self.resolve(&p)),
            other => other,
        })
    }

    pub fn checksum(&self) -> String {
        crate::checksum(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

// ---------------------------------------------------------------------------
// results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub cell: GridCell,
    /// Failure reason; scores are empty when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub scores: BTreeMap<BiasType, BiasScore>,
    /// Mean of the category scores.
    pub overall_score: Option<f64>,
    pub deviations: BTreeMap<BiasType, f64>,
    /// Mean of the category deviations.
    pub deviation: Option<f64>,
    #[serde(default)]
    pub excluded_pairs: Vec<String>,
    pub sample_checksum: Option<String>,
    pub scorer: Option<String>,
    pub scorer_checksum: Option<String>,
    #[serde(default)]
    pub model_checksums: BTreeMap<BiasType, String>,
}

impl BenchResult {
    pub fn failed(cell: GridCell, reason: String) -> Self {
        Self {
            cell,
            error: Some(reason),
            scores: BTreeMap::new(),
            overall_score: None,
            deviations: BTreeMap::new(),
            deviation: None,
            excluded_pairs: Vec::new(),
            sample_checksum: None,
            scorer: None,
            scorer_checksum: None,
            model_checksums: BTreeMap::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn category_scores(&self) -> BTreeMap<BiasType, f64> {
        self.scores.iter().map(|(&k, s)| (k, s.value)).collect()
    }
}

/// Wall-clock record for one cell, kept apart from results so that those stay
/// byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cell: GridCell,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub results: Vec<BenchResult>,
    pub timings: Vec<Timing>,
}

/// Builds a result from a scored sample. `overall_score` and `deviation` are
/// means over the categories present.
pub fn result_from_scores(cell: GridCell, scores: BTreeMap<BiasType, BiasScore>) -> BenchResult {
    let deviations: BTreeMap<BiasType, f64> = scores.iter().map(|(&k, s)| (k, s.deviation())).collect();
    let n = scores.len() as f64;
    let overall = (!scores.is_empty()).then(|| scores.values().map(|s| s.value).sum::<f64>() / n);
    let dev = (!deviations.is_empty()).then(|| deviations.values().sum::<f64>() / n);
    BenchResult {
        cell,
        error: None,
        scores,
        overall_score: overall,
        deviations,
        deviation: dev,
        excluded_pairs: Vec::new(),
        sample_checksum: None,
        scorer: None,
        scorer_checksum: None,
        model_checksums: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------------------
// grid execution

/// Parses each fixture file once; every connection gets its own scorer over the
/// shared immutable table.
#[derive(Default)]
struct Connector {
    fixtures: Mutex<HashMap<PathBuf, Arc<FixtureTable>>>,
}

impl Connector {
    fn connect(&self, spec: &ScorerSpec) -> Result<Box<dyn Scorer>> {
        match spec {
            ScorerSpec::Fixture(p) => {
                let cached = self.fixtures.lock().expect("fixture cache").get(p).cloned();
                let table = match cached {
                    Some(t) => t,
                    None => {
                        let t = Arc::new(FixtureTable::load(p)?);
                        self.fixtures.lock().expect("fixture cache").insert(p.clone(), t.clone());
                        t
                    }
                };
                Ok(Box::new(FixtureScorer::new(table)))
            }
            other => other.connect(),
        }
    }
}

type FitKey = (Language, Technique, u64);
type Fitted = std::result::Result<BTreeMap<BiasType, DebiasModel>, String>;

fn fit_all(cfg: &BenchConfig, conn: &Connector, key: FitKey) -> Result<BTreeMap<BiasType, DebiasModel>> {
    let (x, t, seed) = key;
    let est = t.estimator().expect("projection technique");
    let path = cfg.corpora.get(&x).ok_or_else(|| Error::Config(format!("no corpus for {x}")))?;
    let corpus = Corpus::load(cfg.resolve(path), x)?;
    let corpus = sample_fraction(&corpus, cfg.fit.corpus_fraction, seed)?;
    let spec = cfg.scorer_for(t, seed, x, x)?;
    let mut scorer = conn.connect(&spec)?;
    let lexdir = cfg.lexicon_dir.as_ref().map(|d| cfg.resolve(d));
    let mut out = BTreeMap::new();
    for bias in BiasType::ALL {
        if !t.applies_to(bias) {
            continue;
        }
        let fit = (|| {
            let lex = load_from_dir(lexdir.as_deref(), bias, x)?;
            let table = build_swap_table(&lex)?;
            let reps = collect_attribute_reps(&corpus, &lex, &table, scorer.as_mut(), cfg.fit.max_pairs, cfg.fit.pooling)?;
            fit_model(est, bias, &reps, &cfg.fit.estimator(seed))
        })();
        out.insert(bias, fit.map_err(|e| Error::Config(format!("{bias} fit in {x}: {e}")))?);
    }
    Ok(out)
}

fn sample_checksum(sample: &EvalSample) -> String {
    let ids: Vec<&str> = sample.pairs.iter().map(|p| p.id.as_str()).collect();
    crate::checksum(ids.join("\n").as_bytes())
}

fn run_cell(
    cfg: &BenchConfig,
    conn: &Connector,
    cell: GridCell,
    samples: &BTreeMap<(Language, u64), std::result::Result<EvalSample, String>>,
    fits: &HashMap<FitKey, Fitted>,
) -> Result<BenchResult> {
    let sample = samples
        .get(&(cell.eval_language, cell.seed))
        .expect("sample scheduled")
        .as_ref()
        .map_err(|e| Error::Config(e.clone()))?;
    let models = match cell.technique.estimator() {
        Some(_) => Some(
            fits.get(&(cell.debias_language, cell.technique, cell.seed))
                .expect("fit scheduled")
                .as_ref()
                .map_err(|e| Error::Config(e.clone()))?,
        ),
        None => None,
    };
    let spec = cfg.scorer_for(cell.technique, cell.seed, cell.debias_language, cell.eval_language)?;
    let mut scorer = conn.connect(&spec)?;
    let mut handles: BTreeMap<BiasType, ProjectionHandle> = BTreeMap::new();
    let mut model_checksums = BTreeMap::new();
    if let Some(models) = models {
        for (&bias, model) in models {
            let p = model.scorer_projector();
            let h = register_projection(scorer.as_mut(), ProjectionSpec::Projector(&p), model.technique().as_str())?;
            model_checksums.insert(bias, crate::checksum(model.to_text().as_bytes()));
            handles.insert(bias, h);
        }
    }
    let outcomes = sample
        .pairs
        .iter()
        .map(|p| score_pair(p, scorer.as_mut(), handles.get(&p.bias_type)))
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(outcomes)?;
    let mut result = result_from_scores(cell, report.per_category);
    result.excluded_pairs = report.excluded;
    result.sample_checksum = Some(sample_checksum(sample));
    result.scorer = Some(spec.to_string());
    result.scorer_checksum = Some(spec.provenance()?);
    result.model_checksums = model_checksums;
    Ok(result)
}

/// Runs every cell. Failures are recorded per cell; results come back in
/// canonical cell order whatever the execution order.
pub fn run_grid(cfg: &BenchConfig) -> Result<GridRun> {
    cfg.validate()?;
    let conn = Connector::default();
    let cells = cfg.cells();

    let mut pairs: BTreeMap<Language, std::result::Result<Vec<SentencePair>, String>> = BTreeMap::new();
    for &y in &cfg.languages {
        let loaded = match cfg.crows.get(&y) {
            None => Err(format!("no CrowS-Pairs file for {y}")),
            Some(p) => load_crows_csv(cfg.resolve(p), y).map(|(p, _)| p).map_err(|e| e.to_string()),
        };
        pairs.insert(y, loaded);
    }
    let mut samples = BTreeMap::new();
    for (&y, loaded) in &pairs {
        for &seed in &cfg.seeds {
            let s = match loaded {
                Ok(p) => sample_eval_set(p, cfg.sample_n, seed).map_err(|e| format!("sampling {y}: {e}")),
                Err(e) => Err(e.clone()),
            };
            samples.insert((y, seed), s);
        }
    }

    let fit_keys: BTreeSet<FitKey> = cells
        .iter()
        .filter(|c| c.technique.estimator().is_some())
        .map(|c| (c.debias_language, c.technique, c.seed))
        .collect();
    let fits: HashMap<FitKey, Fitted> = fit_keys
        .into_par_iter()
        .map(|k| (k, fit_all(cfg, &conn, k).map_err(|e| e.to_string())))
        .collect();

    let mut done: Vec<(BenchResult, Timing)> = cells
        .par_iter()
        .map(|&cell| {
            let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
            let clock = Instant::now();
            let result = run_cell(cfg, &conn, cell, &samples, &fits).unwrap_or_else(|e| {
                log::warn!("cell {cell} failed: {e}");
                BenchResult::failed(cell, e.to_string())
            });
            (result, Timing { cell, started_unix_ms: started, elapsed_ms: clock.elapsed().as_millis() })
        })
        .collect();
    done.sort_by(|a, b| a.0.cell.cmp(&b.0.cell));
    let (results, timings) = done.into_iter().unzip();
    Ok(GridRun { results, timings })
}

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const TIMINGS_FILE: &str = "timings.jsonl";

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreRow {
    language: Language,
    technique: Technique,
    debias_language: Language,
    seed: u64,
    category: String,
    score: String,
    deviation: String,
    n_pairs: usize,
}

/// Appends result and timing records and rewrites the per-category score CSV.
pub fn write_run(dir: impl AsRef<Path>, run: &GridRun) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    append_jsonl(&dir.join(RESULTS_FILE), &run.results)?;
    append_jsonl(&dir.join(TIMINGS_FILE), &run.timings)?;
    let all = read_results(dir)?;
    let path = dir.join(SCORES_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in all.iter().filter(|r| r.is_ok()) {
        let row = |category: String, score: f64, dev: f64, n: usize| ScoreRow {
            language: r.cell.eval_language,
            technique: r.cell.technique,
            debias_language: r.cell.debias_language,
            seed: r.cell.seed,
            category,
            score: format!("{score:.4}"),
            deviation: format!("{dev:.4}"),
            n_pairs: n,
        };
        for (k, s) in &r.scores {
            w.serialize(row(k.to_string(), s.value, s.deviation(), s.n_pairs))?;
        }
        if let (Some(o), Some(d)) = (r.overall_score, r.deviation) {
            w.serialize(row("overall".into(), o, d, r.scores.values().map(|s| s.n_pairs).sum()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads `results.jsonl`; when a cell appears more than once the last record wins.
pub fn read_results(dir: impl AsRef<Path>) -> Result<Vec<BenchResult>> {
    let path = dir.as_ref().join(RESULTS_FILE);
    let text = read_to_string(&path)?;
    let mut by_cell: BTreeMap<GridCell, BenchResult> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: BenchResult = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), n + 1)))?;
        by_cell.insert(r.cell, r);
    }
    Ok(by_cell.into_values().collect())
}

// ---------------------------------------------------------------------------
// aggregation

/// True when the score crossed 50 and landed more than ε beyond it.
pub fn overcompensated(base: f64, debiased: f64) -> bool {
    let sb = sign(base - 50.0);
    let st = sign(debiased - 50.0);
    sb != 0 && st != 0 && sb != st && deviation(debiased) > OVERCOMPENSATION_EPS
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Per-category overcompensation flags over the categories both sides share.
pub fn detect_overcompensation(
    base: &BTreeMap<BiasType, f64>,
    debiased: &BTreeMap<BiasType, f64>,
) -> BTreeMap<BiasType, bool> {
    base.iter()
        .filter_map(|(k, &b)| debiased.get(k).map(|&t| (*k, overcompensated(b, t))))
        .collect()
}

/// `100 · (base − tech) / base`.
pub fn pct_difference(dev_base: f64, dev_tech: f64) -> Result<f64> {
    if !(dev_base > 0.0) {
        return Err(Error::Config(format!("base deviation {dev_base} is not positive")));
    }
    Ok(100.0 * (dev_base - dev_tech) / dev_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrow {
    Up,
    Down,
    Equal,
}

impl Arrow {
    /// `Up` iff the deviation increased, `Down` iff strictly lower.
    pub fn between(base: f64, tech: f64) -> Self {
        if tech > base {
            Arrow::Up
        } else if tech < base {
            Arrow::Down
        } else {
            Arrow::Equal
        }
    }

    pub fn symbol(&self) -> &'static str {
        match self {
            Arrow::Up => "↑",
            Arrow::Down => "↓",
            Arrow::Equal => "=",
        }
    }
}

pub fn render_cell(base: f64, tech: f64) -> String {
    format!("{tech:.2} {}", Arrow::between(base, tech).symbol())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub base: f64,
    pub cells: BTreeMap<Technique, f64>,
}

/// Aggregate deviation per evaluation language and technique for one debiasing
/// language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationTable {
    pub debias_language: Language,
    pub rows: BTreeMap<Language, DeviationRow>,
}

impl DeviationTable {
    pub fn techniques(&self) -> Vec<Technique> {
        let set: BTreeSet<Technique> = self.rows.values().flat_map(|r| r.cells.keys().copied()).collect();
        set.into_iter().collect()
    }

    pub fn arrow(&self, eval: Language, t: Technique) -> Option<Arrow> {
        let row = self.rows.get(&eval)?;
        row.cells.get(&t).map(|&v| Arrow::between(row.base, v))
    }

    pub fn rendered(&self, eval: Language, t: Technique) -> Option<String> {
        let row = self.rows.get(&eval)?;
        row.cells.get(&t).map(|&v| render_cell(row.base, v))
    }

    pub fn to_markdown(&self) -> String {
        let techs = self.techniques();
        let mut s = format!("### Debiasing language {}\n\n| Eval | Base |", self.debias_language);
        for t in &techs {
            let _ = write!(s, " {} |", t.label());
        }
        s.push_str("\n|---|---|");
        for _ in &techs {
            s.push_str("---|");
        }
        s.push('\n');
        for (y, row) in &self.rows {
            let _ = write!(s, "| {y} | {:.2} |", row.base);
            for t in &techs {
                match row.cells.get(t) {
                    Some(&v) => {
                        let _ = write!(s, " {} |", render_cell(row.base, v));
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean category scores for one (debias language, eval language, technique).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownEntry {
    /// Mean of the category scores.
    pub overall: f64,
    /// `None` where the technique does not apply to the category.
    pub categories: BTreeMap<BiasType, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownTable {
    pub debias_language: Language,
    pub rows: BTreeMap<Language, BTreeMap<Technique, BreakdownEntry>>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

impl BreakdownTable {
    pub fn techniques(&self) -> Vec<Technique> {
        let set: BTreeSet<Technique> = self.rows.values().flat_map(|r| r.keys().copied()).collect();
        set.into_iter().collect()
    }

    /// Rendered score of a row (`category = None` for the overall line).
    pub fn rendered(&self, eval: Language, t: Technique, category: Option<BiasType>) -> Option<String> {
        let e = self.rows.get(&eval)?.get(&t)?;
        Some(match category {
            None => format!("{:.2}", e.overall),
            Some(c) => fmt_opt(e.categories.get(&c).copied().flatten()),
        })
    }

    pub fn to_markdown(&self) -> String {
        let techs = self.techniques();
        let mut s = format!("### Category breakdown, debiasing language {}\n\n|  |", self.debias_language);
        for t in &techs {
            let _ = write!(s, " {} |", t.label());
        }
        s.push_str("\n|---|");
        for _ in &techs {
            s.push_str("---|");
        }
        s.push('\n');
        for (y, row) in &self.rows {
            let _ = write!(s, "| {y} |");
            for t in &techs {
                let _ = write!(s, " {} |", fmt_opt(row.get(t).map(|e| e.overall)));
            }
            s.push('\n');
            for c in BiasType::ALL {
                let _ = write!(s, "| {} |", c.short());
                for t in &techs {
                    let _ = write!(s, " {} |", fmt_opt(row.get(t).and_then(|e| e.categories.get(&c).copied().flatten())));
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub technique: Technique,
    pub mean_pct_difference: f64,
    pub n_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Best technique first.
    pub entries: Vec<RankingEntry>,
    /// Cells left out because the base deviation was zero.
    pub excluded: Vec<(Language, Language, Technique)>,
}

impl Ranking {
    pub fn order(&self) -> Vec<Technique> {
        self.entries.iter().map(|e| e.technique).collect()
    }

    pub fn get(&self, t: Technique) -> Option<f64> {
        self.entries.iter().find(|e| e.technique == t).map(|e| e.mean_pct_difference)
    }
}

/// Mean percentage difference per technique over every (X, Y) cell.
pub fn technique_ranking(tables: &[DeviationTable]) -> Ranking {
    let mut acc: BTreeMap<Technique, (f64, usize)> = BTreeMap::new();
    let mut excluded = Vec::new();
    for table in tables {
        for (&y, row) in &table.rows {
            for (&t, &v) in &row.cells {
                match pct_difference(row.base, v) {
                    Ok(p) => {
                        let e = acc.entry(t).or_insert((0.0, 0));
                        e.0 += p;
                        e.1 += 1;
                    }
                    Err(_) => excluded.push((table.debias_language, y, t)),
                }
            }
        }
    }
    let mut entries: Vec<RankingEntry> = acc
        .into_iter()
        .map(|(technique, (s, n))| RankingEntry { technique, mean_pct_difference: s / n as f64, n_cells: n })
        .collect();
    entries.sort_by(|a, b| b.mean_pct_difference.total_cmp(&a.mean_pct_difference).then(a.technique.cmp(&b.technique)));
    Ranking { entries, excluded }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestWorst {
    pub eval_language: Language,
    pub best: Language,
    pub worst: Language,
    /// Mean deviation across techniques per debiasing language.
    pub means: BTreeMap<Language, f64>,
}

/// Arg-min and arg-max over debiasing languages of the mean deviation across
/// techniques. Ties go to the earlier language.
pub fn best_worst(tables: &[DeviationTable]) -> Vec<BestWorst> {
    let mut means: BTreeMap<Language, BTreeMap<Language, f64>> = BTreeMap::new();
    for table in tables {
        for (&y, row) in &table.rows {
            if row.cells.is_empty() {
                continue;
            }
            let m = row.cells.values().sum::<f64>() / row.cells.len() as f64;
            means.entry(y).or_default().insert(table.debias_language, m);
        }
    }
    means
        .into_iter()
        .map(|(y, m)| {
            let mut best = *m.keys().next().expect("nonempty");
            let mut worst = best;
            for (&x, &v) in &m {
                if v < m[&best] {
                    best = x;
                }
                if v > m[&worst] {
                    worst = x;
                }
            }
            BestWorst { eval_language: y, best, worst, means: m }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvercompensationFlag {
    pub debias_language: Language,
    pub eval_language: Language,
    pub technique: Technique,
    pub category: BiasType,
    pub base: f64,
    pub debiased: f64,
}

/// Every breakdown cell whose score crossed 50 relative to its base.
pub fn overcompensation_flags(tables: &[BreakdownTable]) -> Vec<OvercompensationFlag> {
    let mut out = Vec::new();
    for table in tables {
        for (&y, row) in &table.rows {
            let Some(base) = row.get(&Technique::None) else { continue };
            for (&t, e) in row {
                if t == Technique::None {
                    continue;
                }
                for (&c, v) in &e.categories {
                    let (Some(b), Some(d)) = (base.categories.get(&c).copied().flatten(), *v) else { continue };
                    if overcompensated(b, d) {
                        out.push(OvercompensationFlag {
                            debias_language: table.debias_language,
                            eval_language: y,
                            technique: t,
                            category: c,
                            base: b,
                            debiased: d,
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub deviations: Vec<DeviationTable>,
    pub breakdowns: Vec<BreakdownTable>,
    pub ranking: Ranking,
    pub best_worst: Vec<BestWorst>,
    pub overcompensation: Vec<OvercompensationFlag>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregate deviation over seeds.
fn seed_deviation(rs: &[&BenchResult], order: AggregationOrder) -> Result<f64> {
    match order {
        AggregationOrder::PerSeedFirst => Ok(mean(&rs.iter().filter_map(|r| r.deviation).collect::<Vec<_>>())),
        AggregationOrder::MeanFirst => {
            let per_seed: Vec<_> = rs.iter().map(|r| r.category_scores()).collect();
            aggregate_deviation(&mean_scores(&per_seed))
        }
    }
}

fn breakdown_entry(rs: &[&BenchResult], t: Technique) -> BreakdownEntry {
    let per_seed: Vec<_> = rs.iter().map(|r| r.category_scores()).collect();
    let m = mean_scores(&per_seed);
    let overall = mean(&m.values().copied().collect::<Vec<_>>());
    let categories = m.into_iter().map(|(c, v)| (c, t.applies_to(c).then_some(v))).collect();
    BreakdownEntry { overall, categories }
}

impl Report {
    pub fn from_tables(deviations: Vec<DeviationTable>, breakdowns: Vec<BreakdownTable>) -> Self {
        let ranking = technique_ranking(&deviations);
        let best_worst = best_worst(&deviations);
        let overcompensation = overcompensation_flags(&breakdowns);
        Self { deviations, breakdowns, ranking, best_worst, overcompensation }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Debiasing benchmark report\n\n## Deviation from 50 (↑ worse than base, ↓ better)\n\n");
        for t in &self.deviations {
            s.push_str(&t.to_markdown());
            s.push('\n');
        }
        s.push_str("## Category bias scores\n\n");
        for t in &self.breakdowns {
            s.push_str(&t.to_markdown());
            s.push('\n');
        }
        s.push_str("## Technique ranking (mean % difference vs base)\n\n| Technique | Mean % difference | Cells |\n|---|---|---|\n");
        for e in &self.ranking.entries {
            let _ = writeln!(s, "| {} | {:.2} | {} |", e.technique.label(), e.mean_pct_difference, e.n_cells);
        }
        if !self.ranking.excluded.is_empty() {
            let _ = writeln!(s, "\nExcluded (zero base deviation): {}", self.ranking.excluded.len());
        }
        s.push_str("\n## Best and worst debiasing language\n\n| Eval | Best | Worst |\n|---|---|---|\n");
        for b in &self.best_worst {
            let _ = writeln!(s, "| {} | {} | {} |", b.eval_language, b.best, b.worst);
        }
        s.push_str("\n## Overcompensation\n\n");
        if self.overcompensation.is_empty() {
            s.push_str("None flagged.\n");
        } else {
            s.push_str("| Debias | Eval | Technique | Category | Base | Debiased |\n|---|---|---|---|---|---|\n");
            for f in &self.overcompensation {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {:.2} | {:.2} |",
                    f.debias_language,
                    f.eval_language,
                    f.technique.label(),
                    f.category.short(),
                    f.base,
                    f.debiased
                );
            }
        }
        s
    }

    /// Writes CSV tables plus `report.md` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("deviations.csv"))?;
        w.write_record(["debias_language", "eval_language", "technique", "deviation", "arrow", "pct_difference"])?;
        for t in &self.deviations {
            for (y, row) in &t.rows {
                w.write_record([t.debias_language.as_str(), y.as_str(), "none", &format!("{:.4}", row.base), "", ""])?;
                for (tech, &v) in &row.cells {
                    let pct = pct_difference(row.base, v).map(|p| format!("{p:.4}")).unwrap_or_default();
                    w.write_record([
                        t.debias_language.as_str(),
                        y.as_str(),
                        tech.as_str(),
                        &format!("{v:.4}"),
                        Arrow::between(row.base, v).symbol(),
                        &pct,
                    ])?;
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("breakdown.csv"))?;
        w.write_record(["debias_language", "eval_language", "technique", "category", "score"])?;
        for t in &self.breakdowns {
            for (y, row) in &t.rows {
                for (tech, e) in row {
                    let base = [t.debias_language.as_str(), y.as_str(), tech.as_str()];
                    w.write_record(base.iter().copied().chain(["overall", &format!("{:.4}", e.overall)]))?;
                    for (c, v) in &e.categories {
                        let v = v.map(|x| format!("{x:.4}")).unwrap_or_default();
                        w.write_record(base.iter().copied().chain([c.as_str(), &v]))?;
                    }
                }
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("ranking.csv"))?;
        w.write_record(["technique", "mean_pct_difference", "n_cells"])?;
        for e in &self.ranking.entries {
            w.write_record([e.technique.as_str(), &format!("{:.4}", e.mean_pct_difference), &e.n_cells.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("best_worst.csv"))?;
        w.write_record(["eval_language", "best", "worst"])?;
        for b in &self.best_worst {
            w.write_record([b.eval_language.as_str(), b.best.as_str(), b.worst.as_str()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("overcompensation.csv"))?;
        w.write_record(["debias_language", "eval_language", "technique", "category", "base", "debiased"])?;
        for f in &self.overcompensation {
            w.write_record([
                f.debias_language.as_str(),
                f.eval_language.as_str(),
                f.technique.as_str(),
                f.category.as_str(),
                &format!("{:.4}", f.base),
                &format!("{:.4}", f.debiased),
            ])?;
        }
        w.flush()?;

        let md = dir.join("report.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

/// Builds every report table from grid results. The base of each evaluation
/// language comes from its `none` results.
pub fn render_report(results: &[BenchResult], order: AggregationOrder) -> Result<Report> {
    let ok: Vec<&BenchResult> = results.iter().filter(|r| r.is_ok()).collect();
    let mut base: BTreeMap<Language, BTreeMap<u64, &BenchResult>> = BTreeMap::new();
    let mut groups: BTreeMap<(Language, Language, Technique), Vec<&BenchResult>> = BTreeMap::new();
    for &r in &ok {
        if r.cell.technique == Technique::None {
            base.entry(r.cell.eval_language).or_default().entry(r.cell.seed).or_insert(r);
        }
        groups.entry((r.cell.debias_language, r.cell.eval_language, r.cell.technique)).or_default().push(r);
    }
    let mut dev_tables: BTreeMap<Language, DeviationTable> = BTreeMap::new();
    let mut bd_tables: BTreeMap<Language, BreakdownTable> = BTreeMap::new();
    for (&(x, y, t), rs) in &groups {
        let base_rs: Vec<&BenchResult> = base
            .get(&y)
            .map(|m| m.values().copied().collect())
            .ok_or_else(|| Error::Config(format!("no base results for {y}")))?;
        let dt = dev_tables
            .entry(x)
            .or_insert_with(|| DeviationTable { debias_language: x, rows: BTreeMap::new() });
        let base_dev = seed_deviation(&base_rs, order)?;
        let row = dt.rows.entry(y).or_insert_with(|| DeviationRow { base: base_dev, cells: BTreeMap::new() });
        let bt = bd_tables
            .entry(x)
            .or_insert_with(|| BreakdownTable { debias_language: x, rows: BTreeMap::new() });
        let brow = bt.rows.entry(y).or_default();
        brow.entry(Technique::None).or_insert_with(|| breakdown_entry(&base_rs, Technique::None));
        if t != Technique::None {
            row.cells.insert(t, seed_deviation(rs, order)?);
            brow.insert(t, breakdown_entry(rs, t));
        }
    }
    for r in results.iter().filter(|r| !r.is_ok()) {
        log::warn!("cell {} left out of the report: {}", r.cell, r.error.as_deref().unwrap_or(""));
    }
    Ok(Report::from_tables(dev_tables.into_values().collect(), bd_tables.into_values().collect()))
}

/// Published deviation and breakdown tables, used as fixtures for the report code.
pub mod reference {
    use super::*;

    const DEVIATIONS: &str = include_str!("../data/reference/deviations.csv");
    const BREAKDOWN: &str = include_str!("../data/reference/breakdown.csv");

    #[derive(Debug, Clone, PartialEq, Deserialize)]
    pub struct DeviationCell {
        pub debias_language: Language,
        pub eval_language: Language,
        pub technique: Technique,
        pub deviation: f64,
        /// Printed marker; absent for base cells.
        pub arrow: Option<Arrow>,
    }

    #[derive(Debug, Clone, PartialEq, Deserialize)]
    pub struct BreakdownCell {
        pub debias_language: Language,
        pub eval_language: Language,
        pub technique: Technique,
        pub category: String,
        pub score: Option<f64>,
    }

    pub fn deviation_cells() -> Result<Vec<DeviationCell>> {
        let mut rdr = csv::Reader::from_reader(DEVIATIONS.as_bytes());
        Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    pub fn breakdown_cells() -> Result<Vec<BreakdownCell>> {
        let mut rdr = csv::Reader::from_reader(BREAKDOWN.as_bytes());
        Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    pub fn deviation_tables() -> Result<Vec<DeviationTable>> {
        let mut tables: BTreeMap<Language, DeviationTable> = BTreeMap::new();
        let cells = deviation_cells()?;
        for c in cells.iter().filter(|c| c.technique == Technique::None) {
            tables
                .entry(c.debias_language)
                .or_insert_with(|| DeviationTable { debias_language: c.debias_language, rows: BTreeMap::new() })
                .rows
                .insert(c.eval_language, DeviationRow { base: c.deviation, cells: BTreeMap::new() });
        }
        for c in cells.iter().filter(|c| c.technique != Technique::None) {
            let row = tables
                .get_mut(&c.debias_language)
                .and_then(|t| t.rows.get_mut(&c.eval_language))
                .ok_or_else(|| Error::Parse(format!("no base for {} {}", c.debias_language, c.eval_language)))?;
            row.cells.insert(c.technique, c.deviation);
        }
        Ok(tables.into_values().collect())
    }

    pub fn breakdown_tables() -> Result<Vec<BreakdownTable>> {
        let mut tables: BTreeMap<Language, BreakdownTable> = BTreeMap::new();
        for c in breakdown_cells()? {
            let entry = tables
                .entry(c.debias_language)
                .or_insert_with(|| BreakdownTable { debias_language: c.debias_language, rows: BTreeMap::new() })
                .rows
                .entry(c.eval_language)
                .or_default()
                .entry(c.technique)
                .or_insert_with(|| BreakdownEntry { overall: f64::NAN, categories: BTreeMap::new() });
            if c.category == "overall" {
                entry.overall = c.score.ok_or_else(|| Error::Parse("overall score missing".into()))?;
            } else {
                entry.categories.insert(c.category.parse()?, c.score);
            }
        }
        Ok(tables.into_values().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overcompensation_rules() {
        assert!(overcompensated(60.90, 47.69));
        assert!(!overcompensated(60.0, 55.0));
        assert!(!overcompensated(50.2, 49.9));
        assert!(!overcompensated(50.0, 40.0));
    }

    #[test]
    fn pct_difference_values() {
        assert!((pct_difference(17.66, 15.14).unwrap() - 14.2695).abs() < 1e-3);
        assert_eq!(pct_difference(3.0, 3.0).unwrap(), 0.0);
        assert!(pct_difference(0.0, 1.0).is_err());
    }

    #[test]
    fn arrows_and_rendering() {
        assert_eq!(render_cell(6.11, 8.70), "8.70 ↑");
        assert_eq!(render_cell(17.66, 13.96), "13.96 ↓");
        assert_eq!(render_cell(5.0, 5.0), "5.00 =");
    }

    #[test]
    fn technique_parsing() {
        for t in Technique::ALL {
            assert_eq!(t.as_str().parse::<Technique>().unwrap(), t);
        }
        assert!("cda".parse::<Technique>().is_err());
    }

    #[test]
    fn scorer_lookup_order() {
        let cfg = BenchConfig::parse(
            r#"
languages = ["EN"]
techniques = ["none", "cda-extern"]
crows = { EN = "en.csv" }
[scorers]
default = "fixture:base_{eval}.jsonl"
[scorers.overrides]
"cda-extern" = "exec:serve --ckpt cda_{lang}_{seed}"
"cda-extern@2" = "tcp:127.0.0.1:7000"
"#,
            "/cfg",
        )
        .unwrap();
        assert_eq!(
            cfg.scorer_for(Technique::None, 0, Language::FR, Language::EN).unwrap(),
            ScorerSpec::Fixture("/cfg/base_EN.jsonl".into())
        );
        assert_eq!(
            cfg.scorer_for(Technique::CdaExtern, 1, Language::FR, Language::EN).unwrap(),
            ScorerSpec::Exec("serve --ckpt cda_FR_1".into())
        );
        assert_eq!(
            cfg.scorer_for(Technique::CdaExtern, 2, Language::FR, Language::EN).unwrap(),
            ScorerSpec::Tcp("127.0.0.1:7000".into())
        );
        assert!(cfg.scorer_for(Technique::DoExtern, 0, Language::EN, Language::EN).is_err());
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.sample_n, 40);
    }

    #[test]
    fn grid_cell_count() {
        let cfg = BenchConfig::parse(
            r#"
languages = ["EN", "FR", "DE", "NL"]
techniques = ["inlp"]
seeds = [0]
crows = {}
[scorers]
"#,
            "",
        )
        .unwrap();
        assert_eq!(cfg.cells().len(), 16);
    }

    #[test]
    fn reference_tables_load() {
        let d = reference::deviation_tables().unwrap();
        assert_eq!(d.len(), 4);
        let b = reference::breakdown_tables().unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b[0].rendered(Language::EN, Technique::None, Some(BiasType::Gender)).unwrap(), "49.17");
    }
}
