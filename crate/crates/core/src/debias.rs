//! Projection-based estimators: SentenceDebias, INLP and DensRay, the linear probe
//! INLP trains, and the uniform apply step.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cda::{sentence_rng, swap_sentence, Corpus, SwapRule};
use crate::error::read_to_string;
use crate::lexicons::{match_attributes, AttributeLexicon, SwapTable};
use crate::linalg::{
    compose_projectors, fix_sign, nullspace_projector, parse_matrix_lines, pca_top_k, subspace_remove,
    symmetric_eigen_desc, write_matrix, BiasSubspace, EmbeddingMatrix, Projector,
};
use crate::scorer::Scorer;
use crate::{BiasType, Error, Result};

/// How a sentence is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Hidden state at the attribute token.
    #[default]
    AttributeToken,
    /// Mean over all positions.
    SentenceMean,
}

/// Representations of attribute occurrences and of their CDA swaps. Row `i` of
/// `original` and row `i` of `swapped` come from the same source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedReps {
    pub original: EmbeddingMatrix,
    pub swapped: EmbeddingMatrix,
    pub original_class: Vec<usize>,
    pub swapped_class: Vec<usize>,
}

impl PairedReps {
    pub fn new(
        original: EmbeddingMatrix,
        swapped: EmbeddingMatrix,
        original_class: Vec<usize>,
        swapped_class: Vec<usize>,
    ) -> Result<Self> {
        if original.rows() != swapped.rows() {
            return Err(Error::DimensionMismatch { expected: original.rows(), got: swapped.rows() });
        }
        if original.dim() != swapped.dim() {
            return Err(Error::DimensionMismatch { expected: original.dim(), got: swapped.dim() });
        }
        for labels in [&original_class, &swapped_class] {
            if labels.len() != original.rows() {
                return Err(Error::DimensionMismatch { expected: original.rows(), got: labels.len() });
            }
        }
        Ok(Self { original, swapped, original_class, swapped_class })
    }

    pub fn len(&self) -> usize {
        self.original.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.original.dim()
    }

    /// All vectors stacked (originals first) with their class labels.
    pub fn labelled(&self) -> Result<(EmbeddingMatrix, Vec<usize>)> {
        let x = self.original.vstack(&self.swapped)?;
        let y = self.original_class.iter().chain(&self.swapped_class).copied().collect();
        Ok((x, y))
    }
}

/// Encodes every sentence with an attribute word together with its CDA swap and
/// keeps the representation of the first attribute occurrence. Stops after `limit`
/// pairs.
pub fn collect_attribute_reps(
    corpus: &Corpus,
    lexicon: &AttributeLexicon,
    table: &SwapTable,
    encoder: &mut dyn Scorer,
    limit: usize,
    pooling: Pooling,
) -> Result<PairedReps> {
    let mut orig_rows = Vec::new();
    let mut swap_rows = Vec::new();
    let mut orig_class = Vec::new();
    let mut swap_class = Vec::new();
    for (i, sent) in corpus.sentences.iter().enumerate() {
        if orig_rows.len() >= limit {
            break;
        }
        let Some(m) = match_attributes(sent, lexicon).into_iter().next() else {
            continue;
        };
        let mut rng = sentence_rng(0, i as u64);
        let swapped = swap_sentence(sent, table, SwapRule::Cycle, &mut rng);
        let sc = lexicon.class_of(&swapped[m.position]).unwrap_or(m.class);
        orig_rows.push(encode(encoder, sent, m.position, pooling)?);
        swap_rows.push(encode(encoder, &swapped, m.position, pooling)?);
        orig_class.push(m.class);
        swap_class.push(sc);
    }
    if orig_rows.is_empty() {
        return Err(Error::NoAttributeOccurrences);
    }
    let dim = orig_rows[0].len();
    PairedReps::new(
        EmbeddingMatrix::from_rows_with_dim(&orig_rows, dim)?,
        EmbeddingMatrix::from_rows_with_dim(&swap_rows, dim)?,
        orig_class,
        swap_class,
    )
}

fn encode(encoder: &mut dyn Scorer, tokens: &[String], pos: usize, pooling: Pooling) -> Result<Vec<f64>> {
    let hs = encoder.hidden_states(tokens, None)?;
    let v = match pooling {
        Pooling::AttributeToken => hs.word_row(pos).ok_or_else(|| {
            Error::Protocol(format!("hidden states for {:?} lack word {pos}", tokens.join(" ")))
        })?,
        Pooling::SentenceMean => hs.matrix.as_matrix().row_mean().transpose(),
    };
    Ok(v.iter().copied().collect())
}

/// SentenceDebias default subspace size.
pub fn default_k(bias: BiasType) -> usize {
    match bias {
        BiasType::Gender => 1,
        BiasType::Race | BiasType::Religion => 2,
    }
}

/// Top-`k` principal directions of the pair-centered representations.
pub fn sentence_debias_fit(pairs: &PairedReps, k: usize) -> Result<BiasSubspace> {
    if pairs.len() < 2 {
        return Err(Error::TooFew { what: "aligned pairs", needed: 2, found: pairs.len() });
    }
    let (n, d) = (pairs.len(), pairs.dim());
    let o = pairs.original.as_matrix();
    let s = pairs.swapped.as_matrix();
    let mut stack = DMatrix::zeros(2 * n, d);
    for i in 0..n {
        for j in 0..d {
            let half = 0.5 * (o[(i, j)] - s[(i, j)]);
            stack[(2 * i, j)] = half;
            stack[(2 * i + 1, j)] = -half;
        }
    }
    pca_top_k(&EmbeddingMatrix::new(stack)?, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Step size relative to the mean squared row norm of the inputs.
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 1.0, epochs: 400, l2: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    /// `c × d`, rows summing to zero.
    pub weights: DMatrix<f64>,
    /// Kept separate; never enters a projection.
    pub intercept: DVector<f64>,
    pub accuracy: f64,
    pub classes: Vec<usize>,
}

impl ProbeFit {
    pub fn predict(&self, x: &DVector<f64>) -> usize {
        let scores = &self.weights * x + &self.intercept;
        self.classes[argmax(scores.as_slice())]
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Distinct labels in ascending order and each sample's index into them.
fn encode_labels(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx = y.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    (classes, idx)
}

/// Fraction of the most frequent label.
pub fn majority_rate(y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let (classes, idx) = encode_labels(y);
    let mut counts = vec![0usize; classes.len()];
    for &i in &idx {
        counts[i] += 1;
    }
    *counts.iter().max().expect("nonempty") as f64 / y.len() as f64
}

/// Multinomial logistic regression by full-batch gradient descent.
pub fn train_linear_probe(x: &EmbeddingMatrix, y: &[usize], cfg: &ProbeConfig) -> Result<ProbeFit> {
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch { expected: x.rows(), got: y.len() });
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let (classes, idx) = encode_labels(y);
    if classes.len() < 2 {
        return Err(Error::SingleClass(classes.len()));
    }
    let (n, d, c) = (x.rows(), x.dim(), classes.len());
    let xm = x.as_matrix();
    let scale = xm.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let step = cfg.learning_rate / scale.max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = DMatrix::from_fn(c, d, |_, _| rng.random_range(-0.01..0.01));
    let mut b = DVector::<f64>::zeros(c);
    let mut onehot = DMatrix::<f64>::zeros(n, c);
    for (i, &k) in idx.iter().enumerate() {
        onehot[(i, k)] = 1.0;
    }
    for _ in 0..cfg.epochs {
        let mut probs = xm * w.transpose();
        for mut row in probs.row_iter_mut() {
            for (v, bk) in row.iter_mut().zip(b.iter()) {
                *v += bk;
            }
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let resid = probs - &onehot;
        let grad_w = resid.transpose() * xm / n as f64 + &w * cfg.l2;
        let grad_b = resid.row_sum().transpose() / n as f64;
        w -= grad_w * step;
        b -= grad_b * cfg.learning_rate;
    }
    // softmax is invariant to a shared shift; centering makes rank(W) ≤ c − 1
    let wmean = w.row_mean();
    for mut row in w.row_iter_mut() {
        row -= &wmean;
    }
    let bmean = b.mean();
    b.add_scalar_mut(-bmean);

    let scores = xm * w.transpose();
    let correct = (0..n)
        .filter(|&i| {
            let s: Vec<f64> = (0..c).map(|k| scores[(i, k)] + b[k]).collect();
            argmax(&s) == idx[i]
        })
        .count();
    Ok(ProbeFit { weights: w, intercept: b, accuracy: correct as f64 / n as f64, classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpConfig {
    pub n_iterations: usize,
    /// Stop once probe accuracy ≤ majority rate + margin.
    pub stop_accuracy_margin: f64,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for InlpConfig {
    fn default() -> Self {
        Self { n_iterations: 30, stop_accuracy_margin: 0.02, probe: ProbeConfig::default(), seed: 0 }
    }
}

impl InlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Config("n_iterations must be ≥ 1".into()));
        }
        if !(self.stop_accuracy_margin >= 0.0) {
            return Err(Error::Config("stop_accuracy_margin must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InlpFit {
    pub projector: Projector,
    /// Nullspace projections applied.
    pub iterations: usize,
    /// Probe accuracy at each trained round, including the final stopping one.
    pub accuracies: Vec<f64>,
    pub majority: f64,
}

/// Iterative nullspace projection.
pub fn inlp_fit(x: &EmbeddingMatrix, y: &[usize], cfg: &InlpConfig) -> Result<InlpFit> {
    cfg.validate()?;
    let majority = majority_rate(y);
    let mut current = x.clone();
    let mut steps = Vec::new();
    let mut accuracies = Vec::new();
    for i in 0..cfg.n_iterations {
        let probe_cfg = ProbeConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.probe.clone() };
        let fit = train_linear_probe(&current, y, &probe_cfg)?;
        accuracies.push(fit.accuracy);
        if fit.accuracy <= majority + cfg.stop_accuracy_margin {
            break;
        }
        let p = match nullspace_projector(&fit.weights) {
            Ok(p) => p,
            Err(Error::ZeroClassifier) => break,
            Err(e) => return Err(e),
        };
        current = current.project(&p)?;
        steps.push(p);
        log::debug!("inlp round {i}: accuracy {:.4}", fit.accuracy);
    }
    let projector = compose_projectors(x.dim(), &steps)?;
    Ok(InlpFit { projector, iterations: steps.len(), accuracies, majority })
}

/// `Σ_{different class} δδᵀ − Σ_{same class} δδᵀ` over unordered pairs with
/// `δ = (x_i − x_j)/‖x_i − x_j‖`; coincident points are skipped.
pub fn densray_matrix(x: &EmbeddingMatrix, y: &[usize]) -> Result<DMatrix<f64>> {
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch { expected: x.rows(), got: y.len() });
    }
    let (classes, _) = encode_labels(y);
    if classes.len() != 2 {
        return Err(Error::DensRayBinaryOnly(classes.len()));
    }
    let (n, d) = (x.rows(), x.dim());
    let xm = x.as_matrix();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let m = n - i - 1;
        if m == 0 {
            break;
        }
        let mut diffs = DMatrix::<f64>::zeros(m, d);
        let mut signs = DMatrix::<f64>::zeros(m, d);
        for (r, j) in (i + 1..n).enumerate() {
            let delta = xm.row(i) - xm.row(j);
            let norm = delta.norm();
            if norm == 0.0 {
                continue;
            }
            let s = if y[i] == y[j] { -1.0 } else { 1.0 };
            for k in 0..d {
                diffs[(r, k)] = delta[k] / norm;
                signs[(r, k)] = s * delta[k] / norm;
            }
        }
        a += diffs.transpose() * signs;
    }
    Ok((&a + a.transpose()) * 0.5)
}

/// Top eigenvector of [`densray_matrix`] as a one-row subspace.
pub fn densray_fit(x: &EmbeddingMatrix, y: &[usize]) -> Result<BiasSubspace> {
    let a = densray_matrix(x, y)?;
    let (lambda, v) = symmetric_eigen_desc(&a).into_iter().next().ok_or(Error::EmptyInput)?;
    if lambda <= 0.0 {
        log::warn!("DensRay top eigenvalue {lambda:.3e} ≤ 0: classes are not separated");
    }
    let mut v = v.normalize();
    fix_sign(&mut v);
    BiasSubspace::new(DMatrix::from_row_slice(1, v.len(), v.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebiasTechnique {
    None,
    SenDeb,
    Inlp,
    DensRay,
}

impl DebiasTechnique {
    pub fn as_str(&self) -> &'static str {
        match self {
            DebiasTechnique::None => "none",
            DebiasTechnique::SenDeb => "sendeb",
            DebiasTechnique::Inlp => "inlp",
            DebiasTechnique::DensRay => "densray",
        }
    }
}

impl fmt::Display for DebiasTechnique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DebiasTechnique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(DebiasTechnique::None),
            "sendeb" => Ok(DebiasTechnique::SenDeb),
            "inlp" => Ok(DebiasTechnique::Inlp),
            "densray" => Ok(DebiasTechnique::DensRay),
            other => Err(Error::UnknownLabel { kind: "technique", value: other.into() }),
        }
    }
}

/// Fitting knobs shared by the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EstimatorConfig {
    /// SentenceDebias subspace size; `None` uses [`default_k`].
    pub sendeb_k: Option<usize>,
    pub inlp: InlpConfig,
}

impl EstimatorConfig {
    pub fn checksum(&self) -> String {
        crate::checksum(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// A fitted debiasing artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasModel {
    technique: DebiasTechnique,
    dim: usize,
    subspace: Option<BiasSubspace>,
    projector: Option<Projector>,
    pub seed: u64,
    pub config_checksum: String,
}

impl DebiasModel {
    pub fn none(dim: usize) -> Self {
        Self { technique: DebiasTechnique::None, dim, subspace: None, projector: None, seed: 0, config_checksum: String::new() }
    }

    pub fn from_subspace(technique: DebiasTechnique, subspace: BiasSubspace) -> Result<Self> {
        if !matches!(technique, DebiasTechnique::SenDeb | DebiasTechnique::DensRay) {
            return Err(Error::Config(format!("{technique} is not a subspace technique")));
        }
        Ok(Self {
            technique,
            dim: subspace.dim(),
            subspace: Some(subspace),
            projector: None,
            seed: 0,
            config_checksum: String::new(),
        })
    }

    pub fn from_projector(projector: Projector) -> Self {
        Self {
            technique: DebiasTechnique::Inlp,
            dim: projector.dim(),
            subspace: None,
            projector: Some(projector),
            seed: 0,
            config_checksum: String::new(),
        }
    }

    pub fn with_provenance(mut self, seed: u64, config_checksum: impl Into<String>) -> Self {
        self.seed = seed;
        self.config_checksum = config_checksum.into();
        self
    }

    pub fn technique(&self) -> DebiasTechnique {
        self.technique
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subspace(&self) -> Option<&BiasSubspace> {
        self.subspace.as_ref()
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    /// Removed dimensions.
    pub fn k(&self) -> usize {
        match (&self.subspace, &self.projector) {
            (Some(s), _) => s.k(),
            (None, Some(p)) => self.dim - p.rank(),
            (None, None) => 0,
        }
    }

    /// The `d × d` map a scorer applies to final-layer states.
    pub fn scorer_projector(&self) -> Projector {
        match (&self.subspace, &self.projector) {
            (Some(s), _) => s.removal_projector(),
            (None, Some(p)) => p.clone(),
            (None, None) => Projector::identity(self.dim),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "technique {}\nd {}\nk {}\nseed {}\nconfig_checksum {}\n",
            self.technique,
            self.dim,
            self.k(),
            self.seed,
            if self.config_checksum.is_empty() { "-" } else { &self.config_checksum }
        );
        match (&self.subspace, &self.projector) {
            (Some(sub), _) => s.push_str(&write_matrix(sub.basis())),
            (None, Some(p)) => s.push_str(&write_matrix(p.matrix())),
            (None, None) => {}
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing header field {name}")))?;
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("malformed header line {line:?}")))?;
            if key != name {
                return Err(Error::Parse(format!("expected header field {name}, found {key}")));
            }
            Ok(value.trim().to_string())
        };
        let technique: DebiasTechnique = field("technique")?.parse()?;
        let num = |v: String, name: &str| -> Result<u64> {
            v.parse().map_err(|_| Error::Parse(format!("bad {name} {v:?}")))
        };
        let dim = num(field("d")?, "d")? as usize;
        let k = num(field("k")?, "k")? as usize;
        let seed = num(field("seed")?, "seed")?;
        let checksum = field("config_checksum")?;
        let checksum = if checksum == "-" { String::new() } else { checksum };
        let model = match technique {
            DebiasTechnique::None => Self::none(dim),
            DebiasTechnique::SenDeb | DebiasTechnique::DensRay => {
                let basis = parse_matrix_lines(&mut lines)?;
                if basis.ncols() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: basis.ncols() });
                }
                Self::from_subspace(technique, BiasSubspace::new(basis)?)?
            }
            DebiasTechnique::Inlp => {
                let p = parse_matrix_lines(&mut lines)?;
                if p.ncols() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: p.ncols() });
                }
                Self::from_projector(Projector::new(p)?)
            }
        };
        if model.k() != k {
            return Err(Error::Parse(format!("header k {k} disagrees with payload k {}", model.k())));
        }
        Ok(model.with_provenance(seed, checksum))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }
}

/// Fits `technique` for one bias type on collected representations.
pub fn fit_model(technique: DebiasTechnique, bias: BiasType, reps: &PairedReps, cfg: &EstimatorConfig) -> Result<DebiasModel> {
    let model = match technique {
        DebiasTechnique::None => DebiasModel::none(reps.dim()),
        DebiasTechnique::SenDeb => {
            let k = cfg.sendeb_k.unwrap_or_else(|| default_k(bias));
            DebiasModel::from_subspace(technique, sentence_debias_fit(reps, k)?)?
        }
        DebiasTechnique::Inlp => {
            let (x, y) = reps.labelled()?;
            DebiasModel::from_projector(inlp_fit(&x, &y, &cfg.inlp)?.projector)
        }
        DebiasTechnique::DensRay => {
            let (x, y) = reps.labelled()?;
            DebiasModel::from_subspace(technique, densray_fit(&x, &y)?)?
        }
    };
    Ok(model.with_provenance(cfg.inlp.seed, cfg.checksum()))
}

pub fn apply_debias(h: &DVector<f64>, model: &DebiasModel) -> Result<DVector<f64>> {
    if h.len() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: h.len() });
    }
    match (&model.subspace, &model.projector) {
        (Some(s), _) => subspace_remove(h, s),
        (None, Some(p)) => p.apply(h),
        (None, None) => Ok(h.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sendeb_hand_case() {
        let reps = PairedReps::new(em(&[&[1.0, 0.0], &[2.0, 0.0]]), em(&[&[-1.0, 0.0], &[-2.0, 0.0]]), vec![0, 0], vec![1, 1]).unwrap();
        let s = sentence_debias_fit(&reps, 1).unwrap();
        assert!((s.direction(0)[0] - 1.0).abs() < 1e-12);
        assert!(s.direction(0)[1].abs() < 1e-12);
    }

    #[test]
    fn sendeb_identical_pairs_rank_error() {
        let a = em(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let reps = PairedReps::new(a.clone(), a, vec![0, 0], vec![1, 1]).unwrap();
        assert!(matches!(sentence_debias_fit(&reps, 1), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn sendeb_needs_two_pairs() {
        let reps = PairedReps::new(em(&[&[1.0, 0.0]]), em(&[&[-1.0, 0.0]]), vec![0], vec![1]).unwrap();
        assert!(matches!(sentence_debias_fit(&reps, 1), Err(Error::TooFew { .. })));
    }

    #[test]
    fn probe_single_class_error() {
        let x = em(&[&[1.0], &[2.0]]);
        assert!(matches!(train_linear_probe(&x, &[3, 3], &ProbeConfig::default()), Err(Error::SingleClass(1))));
    }

    #[test]
    fn probe_identical_rows_majority() {
        let row: &[f64] = &[1.0, 1.0];
        let x = em(&[row; 5]);
        let fit = train_linear_probe(&x, &[0, 0, 0, 1, 1], &ProbeConfig::default()).unwrap();
        assert!((fit.accuracy - 0.6).abs() < 1e-12);
    }

    #[test]
    fn probe_weights_centered() {
        let x = em(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        let fit = train_linear_probe(&x, &[0, 1, 2, 1], &ProbeConfig::default()).unwrap();
        for j in 0..2 {
            assert!(fit.weights.column(j).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn densray_rejects_three_classes() {
        let x = em(&[&[1.0], &[2.0], &[3.0]]);
        assert!(matches!(densray_fit(&x, &[0, 1, 2]), Err(Error::DensRayBinaryOnly(3))));
    }

    #[test]
    fn densray_axis() {
        let x = em(&[&[1.0, 0.1], &[1.0, -0.1], &[-1.0, 0.1], &[-1.0, -0.1]]);
        let s = densray_fit(&x, &[0, 0, 1, 1]).unwrap();
        assert!(s.direction(0)[0] > 0.99);
    }

    #[test]
    fn apply_variants() {
        let h = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(apply_debias(&h, &DebiasModel::none(2)).unwrap(), h);
        let s = BiasSubspace::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let m = DebiasModel::from_subspace(DebiasTechnique::SenDeb, s).unwrap();
        let out = apply_debias(&h, &m).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 4.0]);
        assert!(apply_debias(&DVector::zeros(3), &m).is_err());
    }

    #[test]
    fn model_text_round_trip() {
        let s = BiasSubspace::new(DMatrix::from_row_slice(1, 3, &[0.6, 0.8, 0.0])).unwrap();
        let m = DebiasModel::from_subspace(DebiasTechnique::DensRay, s).unwrap().with_provenance(7, "abc");
        let back = DebiasModel::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let p = nullspace_projector(&DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        let m = DebiasModel::from_projector(p);
        let back = DebiasModel::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.k(), 1);
        let none = DebiasModel::none(5);
        assert_eq!(DebiasModel::parse(&none.to_text()).unwrap(), none);
    }

    #[test]
    fn inlp_zero_iterations_rejected() {
        let cfg = InlpConfig { n_iterations: 0, ..InlpConfig::default() };
        let x = em(&[&[1.0], &[-1.0]]);
        assert!(inlp_fit(&x, &[0, 1], &cfg).is_err());
    }
}
